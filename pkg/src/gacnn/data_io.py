"""Point files, derived features, checkpoints and prediction export.

Point files are whitespace-separated text, one point per line::

    x y z intensity return_number num_returns [label]

Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import FEATURE_COLUMNS, DataConfig, RunConfig
from .errors import CorruptionError, FormatError, ParseError
from .geometry import PointCloud
from .network import GacnnModel

RAW_COLUMNS = ("intensity", "return_number", "num_returns")
MAGIC = b"GACNNCKP"
VERSION = 1


@dataclass
class PointRecord:
    x: float
    y: float
    z: float
    intensity: float
    return_number: int
    num_returns: int
    label: int | None = None


def _text_lines(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data.splitlines()


def _parse_record(fields, lineno, has_labels):
    expected = 7 if has_labels else 6
    if len(fields) != expected:
        raise ParseError(f"expected {expected} fields, found {len(fields)}", lineno)
    try:
        x, y, z, intensity = (float(f) for f in fields[:4])
        ret, nret = int(fields[4]), int(fields[5])
        label = int(fields[6]) if has_labels else None
    except ValueError as e:
        raise ParseError(f"non-numeric field ({e})", lineno) from None
    if not all(np.isfinite((x, y, z, intensity))):
        raise ParseError("non-finite value", lineno)
    if not 1 <= ret <= nret:
        raise ParseError(f"return number {ret} not within 1..{nret}", lineno)
    return PointRecord(x, y, z, intensity, ret, nret, label)


def read_point_records(source, has_labels=None):
    """Parse every data line into a :class:`PointRecord`.

    ``has_labels=None`` decides from the first data line (7 fields means labelled).
    """
    records = []
    for lineno, line in enumerate(_text_lines(source), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if has_labels is None:
            has_labels = len(fields) == 7
        records.append(_parse_record(fields, lineno, has_labels))
    if not records:
        raise ParseError("no points")
    return records


def parse_point_file(source, has_labels=None):
    """Read a point file into a cloud with raw columns ``intensity, return_number, num_returns``."""
    records = read_point_records(source, has_labels)
    coords = np.array([(r.x, r.y, r.z) for r in records])
    feats = np.array([(r.intensity, r.return_number, r.num_returns) for r in records], dtype=np.float64)
    labels = None
    if records[0].label is not None:
        labels = np.array([r.label for r in records], dtype=np.int64)
    return PointCloud(coords, feats, labels, RAW_COLUMNS)


def compute_height_above_ground(cloud, cell_size=2.0):
    """Height of each point over the lowest point in its horizontal grid cell."""
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    pts = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    cell = np.floor((pts[:, :2] - pts[:, :2].min(0)) / cell_size).astype(np.int64)
    _, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    floor = np.full(inverse.max() + 1, np.inf)
    np.minimum.at(floor, inverse, pts[:, 2])
    return pts[:, 2] - floor[inverse]


def select_features(cloud: PointCloud, names, cell_size=2.0):
    """Cloud whose feature columns are exactly ``names``, in that order."""
    columns = []
    for name in names:
        if name == "height_above_ground":
            columns.append(compute_height_above_ground(cloud, cell_size))
        elif name in cloud.feature_names:
            columns.append(cloud.features[:, cloud.feature_names.index(name)])
        else:
            raise ParseError(f"feature {name!r} not available (have {cloud.feature_names})")
    feats = np.stack(columns, axis=1) if columns else np.zeros((len(cloud), 0))
    return PointCloud(cloud.coords, feats, cloud.labels, tuple(names))


# -- checkpoints ---------------------------------------------------------

def _pack_str(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(model: GacnnModel, path, run_config: RunConfig | None = None):
    """Write the model atomically (temp file + rename) in the binary container format."""
    if run_config is None:
        run_config = _config_for_model(model)
    elif run_config.network != model.config:
        raise FormatError("run config network section does not describe this model")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(run_config.to_text()))
    for name, p in model.named_parameters().items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_for_model(model):
    n = model.config.input_feature_count
    if n > len(FEATURE_COLUMNS):
        raise FormatError(f"cannot describe {n} input features with the known columns")
    return RunConfig(network=model.config, data=DataConfig(features=FEATURE_COLUMNS[:n]))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        return self.take(self.u32(what), what).decode("utf-8")

    @property
    def done(self):
        return self.pos == len(self.data)


def load_checkpoint_with_config(path):
    """Read a checkpoint; returns ``(model, run_config)``."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if len(reader.data) < len(MAGIC) and MAGIC.startswith(reader.data):
        raise CorruptionError(f"{path}: checkpoint truncated inside the header")
    if len(reader.data) < len(MAGIC) or reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: not a GACNN checkpoint (bad magic)")
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    run_config = RunConfig.from_text(reader.text("config"))
    model = GacnnModel.init(run_config.network)
    expected = model.named_parameters()
    loaded = {}
    while not reader.done:
        name = reader.text("parameter name")
        rank = reader.u32(f"{name} rank")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{name} dims"))
        if name not in expected:
            raise CorruptionError(f"unexpected parameter {name}")
        if tuple(shape) != expected[name].shape:
            raise CorruptionError(f"parameter {name} has shape {shape}, config implies {expected[name].shape}")
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * count, f"{name} values")
        loaded[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    missing = [n for n in expected if n not in loaded]
    if missing:
        raise CorruptionError(f"checkpoint is missing parameters: {', '.join(missing[:3])}")
    for name, p in expected.items():
        p.data = loaded[name]
    return model, run_config


def load_checkpoint(path):
    return load_checkpoint_with_config(path)[0]


# -- predictions ---------------------------------------------------------

def write_predictions(cloud: PointCloud, labels, path, probabilities=None, truth=None):
    """Write ``x y z label [correct] [p_0 .. p_C-1]`` lines.

    ``truth`` defaults to the cloud's labels; when present a 0/1 flag column
    marks correct predictions. A leading comment names the columns.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(cloud),):
        raise ValueError(f"{len(labels)} labels for {len(cloud)} points")
    if truth is None:
        truth = cloud.labels
    header = ["x", "y", "z", "label"]
    cols = [cloud.coords, labels[:, None]]
    fmt = ["%.6f"] * 3 + ["%d"]
    if truth is not None:
        header.append("correct")
        cols.append((np.asarray(truth) == labels).astype(np.int64)[:, None])
        fmt.append("%d")
    if probabilities is not None:
        probabilities = np.asarray(probabilities, dtype=np.float64)
        header.extend(f"p{c}" for c in range(probabilities.shape[1]))
        cols.append(probabilities)
        fmt.extend(["%.8f"] * probabilities.shape[1])
    table = np.column_stack([np.asarray(c, dtype=np.float64) for c in cols])
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# " + " ".join(header) + "\n")
            np.savetxt(fh, table, fmt=fmt)
    except OSError as e:
        raise OSError(f"cannot write predictions to {path}: {e.strerror or e}") from e


@dataclass
class Predictions:
    coords: np.ndarray
    labels: np.ndarray
    correct: np.ndarray | None
    probabilities: np.ndarray | None


def read_predictions(path):
    lines = _text_lines(path)
    header = None
    rows = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            if header is None and lineno == 1:
                header = text[1:].split()
            continue
        rows.append((lineno, text.split()))
    if not rows:
        raise ParseError("no points")
    width = len(rows[0][1])
    has_flag = "correct" in header if header else width == 5
    table = []
    for lineno, fields in rows:
        if len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", lineno)
        try:
            table.append([float(f) for f in fields])
        except ValueError as e:
            raise ParseError(f"non-numeric field ({e})", lineno) from None
    table = np.array(table)
    start = 5 if has_flag else 4
    return Predictions(
        coords=table[:, :3],
        labels=table[:, 3].astype(np.int64),
        correct=table[:, 4].astype(np.int64) if has_flag else None,
        probabilities=table[:, start:] if width > start else None,
    )
