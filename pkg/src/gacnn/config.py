"""Run configuration: ``key = value`` lines grouped in per-module sections.

::

    [network]
    sample_sizes = 1024, 512, 64, 16
    encoder_dims = 32 32 64; 64 64 128; 128 128 256; 256 256 512
    use_global = true

    [training]
    base_lr = 0.01

Unknown sections or keys are rejected, and every value is validated by
constructing the module's config object at load time.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigurationError, GacnnError
from .network import GacnnConfig
from .training import TrainConfig

ISPRS_CLASSES = ("power", "low_veg", "imp_surf", "car", "fence_hedge", "roof", "facade", "shrub", "tree")
FEATURE_COLUMNS = ("intensity", "height_above_ground", "return_number", "num_returns")


@dataclass
class DataConfig:
    features: tuple = ("intensity", "height_above_ground")
    hag_cell_size: float = 2.0
    tile_x: float = 30.0
    tile_y: float = 30.0
    tile_z: float = 40.0
    min_points: int = 1024
    file_pattern: str = "*.txt"
    checkpoint_interval: int = 500
    predict_seed: int = 0

    def __post_init__(self):
        self.features = tuple(self.features)
        unknown = [f for f in self.features if f not in FEATURE_COLUMNS]
        if unknown:
            raise ConfigurationError(f"unknown feature columns {unknown}; choose from {FEATURE_COLUMNS}")
        if len(set(self.features)) != len(self.features):
            raise ConfigurationError("feature columns must not repeat")
        if min(self.tile_x, self.tile_y, self.tile_z, self.hag_cell_size) <= 0:
            raise ConfigurationError("tile sizes and hag_cell_size must be positive")
        if self.min_points < 0 or self.checkpoint_interval < 1:
            raise ConfigurationError("min_points must be >= 0 and checkpoint_interval >= 1")


@dataclass
class EvalConfig:
    class_names: tuple = ISPRS_CLASSES

    def __post_init__(self):
        self.class_names = tuple(self.class_names)


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text, item=str):
    return tuple(item(t) for t in text.replace(",", " ").split())


def _parse_nested(text):
    return tuple(tuple(int(v) for v in group.replace(",", " ").split())
                 for group in text.split(";") if group.strip())


_NONE = ("", "none", "auto")


def _decode(kind, text):
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "opt_int":
        return None if text.strip().lower() in _NONE else int(text)
    if kind == "opt_float":
        return None if text.strip().lower() in _NONE else float(text)
    if kind == "ints":
        return _parse_list(text, int)
    if kind == "opt_floats":
        return None if text.strip().lower() in _NONE else _parse_list(text, float)
    if kind == "nested":
        return _parse_nested(text)
    if kind == "names":
        return _parse_list(text)
    return text.strip()


def _encode(kind, value):
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind == "nested":
        return "; ".join(" ".join(str(v) for v in group) for group in value)
    if kind in ("ints", "names", "opt_floats"):
        return ", ".join(str(v) for v in value)
    return repr(value) if kind in ("float", "opt_float") else str(value)


SCHEMA = {
    "network": (GacnnConfig, {
        "sample_sizes": "ints", "encoder_dims": "nested", "decoder_dims": "nested",
        "k_encoder": "int", "k_decoder": "int", "num_classes": "int",
        "use_global": "bool", "use_edge": "bool", "use_density": "bool",
        "idw_k": "int", "idw_power": "float", "fps_seed_index": "int", "kde_bandwidth": "opt_float",
    }),
    "training": (TrainConfig, {
        "base_lr": "float", "lr_halving_interval": "int", "batch_size": "int",
        "points_per_block": "int", "drop_fraction": "float", "epochs": "int", "steps": "opt_int",
        "rng_seed": "int", "class_weights": "opt_floats",
        "beta1": "float", "beta2": "float", "epsilon": "float",
    }),
    "data": (DataConfig, {
        "features": "names", "hag_cell_size": "float", "tile_x": "float", "tile_y": "float",
        "tile_z": "float", "min_points": "int", "file_pattern": "str",
        "checkpoint_interval": "int", "predict_seed": "int",
    }),
    "evaluation": (EvalConfig, {"class_names": "names"}),
}


@dataclass
class RunConfig:
    network: GacnnConfig = field(default_factory=GacnnConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        n_feat = len(self.data.features)
        if self.network.input_feature_count != n_feat:
            self.network = dataclasses.replace(self.network, input_feature_count=n_feat)

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigurationError(f"malformed config: {e}") from None
        sections = {}
        for name in parser.sections():
            if name not in SCHEMA:
                raise ConfigurationError(f"unknown config section [{name}]")
            klass, kinds = SCHEMA[name]
            values = {}
            for key, raw in parser.items(name):
                if key not in kinds:
                    raise ConfigurationError(f"unknown key {key!r} in [{name}]")
                try:
                    values[key] = _decode(kinds[key], raw)
                except ValueError as e:
                    raise ConfigurationError(f"[{name}] {key}: {e}") from None
            try:
                sections[name] = klass(**values)
            except GacnnError as e:
                raise ConfigurationError(f"[{name}] {e}") from None
        return cls(**sections)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self):
        lines = []
        for name, (_, kinds) in SCHEMA.items():
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for key, kind in kinds.items():
                lines.append(f"{key} = {_encode(kind, getattr(section, key))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **changes):
        """Copy with ``section__key=value`` overrides applied and revalidated."""
        grouped = {}
        for compound, value in changes.items():
            section, key = compound.split("__", 1)
            if section not in SCHEMA or key not in SCHEMA[section][1]:
                raise ConfigurationError(f"unknown setting {section}.{key}")
            grouped.setdefault(section, {})[key] = value
        parts = {name: getattr(self, name) for name in SCHEMA}
        for section, values in grouped.items():
            try:
                parts[section] = dataclasses.replace(parts[section], **values)
            except GacnnError as e:
                raise ConfigurationError(f"[{section}] {e}") from None
        return RunConfig(**parts)
