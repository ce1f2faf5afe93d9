"""``gacnn`` command line: train, predict, evaluate, inspect-attention."""
from __future__ import annotations

import argparse
import glob
import os
import sys
import traceback

import numpy as np

from . import tensor as T
from .config import ISPRS_CLASSES, RunConfig
from .data_io import (
    load_checkpoint_with_config,
    parse_point_file,
    read_predictions,
    save_checkpoint,
    select_features,
    write_predictions,
)
from .errors import DataError, GacnnError, ParameterError
from .evaluation import ConfusionMatrix, format_report
from .geometry import tile_indices
from .network import GacnnModel, encode, pad_cloud, predict
from .training import train


def _load_config(args):
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "no_global", False):
        overrides["network__use_global"] = False
    if getattr(args, "no_edge_attn", False):
        overrides["network__use_edge"] = False
    if getattr(args, "no_density_attn", False):
        overrides["network__use_density"] = False
    if getattr(args, "steps", None) is not None:
        overrides["training__steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["training__rng_seed"] = args.seed
    return rc.with_overrides(**overrides) if overrides else rc


def _prepared_cloud(path, rc, has_labels=None):
    cloud = parse_point_file(path, has_labels)
    return select_features(cloud, rc.data.features, rc.data.hag_cell_size)


def _tiles(cloud, rc):
    d = rc.data
    return tile_indices(cloud, d.tile_x, d.tile_y, d.tile_z, d.min_points)


def cmd_train(args):
    rc = _load_config(args)
    pattern = os.path.join(args.data_dir, rc.data.file_pattern)
    files = sorted(glob.glob(pattern))
    if not files:
        raise ParameterError(f"no point files match {pattern}")
    tiles = []
    for path in files:
        cloud = _prepared_cloud(path, rc, has_labels=True)
        if cloud.labels.max() >= rc.network.num_classes:
            raise DataError(f"{path}: label {cloud.labels.max()} exceeds num_classes={rc.network.num_classes}")
        tiles.extend(cloud.subset(idx) for idx in _tiles(cloud, rc))
    print(f"training on {len(tiles)} tiles from {len(files)} files", flush=True)
    model = GacnnModel.init(rc.network, seed=rc.training.rng_seed)
    interval = rc.data.checkpoint_interval

    def on_step(record, m):
        print(record, flush=True)
        if (record.step + 1) % interval == 0:
            save_checkpoint(m, args.out, rc)

    train(model, tiles, rc.training, on_step=on_step)
    save_checkpoint(model, args.out, rc)
    print(f"saved {args.out}")
    return 0


def cmd_predict(args):
    model, rc = load_checkpoint_with_config(args.checkpoint)
    cloud = _prepared_cloud(args.points, rc)
    probs = np.zeros((len(cloud), model.config.num_classes))
    for idx in _tiles(cloud, rc):
        probs[idx], _ = predict(model, cloud.subset(idx), seed=rc.data.predict_seed)
    labels = np.argmax(probs, axis=1)
    write_predictions(cloud, labels, args.out, None if args.no_probabilities else probs)
    print(f"wrote {len(cloud)} predictions to {args.out}")
    return 0


def cmd_evaluate(args):
    pred = read_predictions(args.predictions)
    truth = parse_point_file(args.truth, has_labels=True)
    if len(pred.labels) != len(truth):
        raise DataError(f"{len(pred.labels)} predictions for {len(truth)} ground-truth points")
    names = tuple(args.class_names.split(",")) if args.class_names else ISPRS_CLASSES
    n = args.num_classes or max(int(truth.labels.max()), int(pred.labels.max())) + 1
    cm = ConfusionMatrix(n).accumulate(truth.labels, pred.labels)
    print(format_report(cm.metrics(), names))
    return 0


def _write_table(path, rows, fmt="%.8g"):
    np.savetxt(path, rows, fmt=fmt)


def cmd_inspect(args):
    model, rc = load_checkpoint_with_config(args.checkpoint)
    if not 1 <= args.level <= len(model.encoders):
        raise ParameterError(f"level must be in 1..{len(model.encoders)}, got {args.level}")
    cloud = pad_cloud(_prepared_cloud(args.points, rc), model.config.sample_sizes[0], rc.data.predict_seed)
    traces = {}
    with T.no_grad():
        levels = encode(model, cloud, traces=traces)
    h = levels.hierarchy
    chosen = np.arange(len(cloud))
    for t in range(1, args.level + 1):
        chosen = chosen[h.sampled[t]]
    coords = cloud.coords[chosen]
    graph = h.enc_graph[args.level]
    trace = traces[args.level]
    os.makedirs(args.out, exist_ok=True)
    n, k = graph.indices.shape
    ii, kk = np.meshgrid(np.arange(n), np.arange(k), indexing="ij")
    edge_cols = [ii.ravel(), kk.ravel(), graph.indices.ravel()]
    if "edge_weights" in trace:
        w = trace["edge_weights"].data.reshape(n * k, -1)
        _write_table(os.path.join(args.out, "edge_attention.txt"), np.column_stack(edge_cols + [w]))
    if "density_weights" in trace:
        w = trace["density_weights"].data.reshape(n * k, -1)
        _write_table(os.path.join(args.out, "density_attention.txt"), np.column_stack(edge_cols + [w]))
    if "global_weights" in trace:
        g = trace["global_weights"].data
        gi, gj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        _write_table(os.path.join(args.out, "global_attention.txt"),
                     np.column_stack([gi.ravel(), gj.ravel(), g.reshape(n * n, -1)]))
    _write_table(os.path.join(args.out, "features_out.txt"),
                 np.column_stack([coords, trace["output"].data]))
    print(f"wrote level-{args.level} attention maps for {n} points to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gacnn", description="Graph attention point cloud classifier")
    sub = parser.add_subparsers(dest="command", metavar="{train,predict,evaluate,inspect-attention}")

    p = sub.add_parser("train", help="train a model on labelled point files")
    p.add_argument("data_dir")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-global", action="store_true")
    p.add_argument("--no-edge-attn", action="store_true")
    p.add_argument("--no-density-attn", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label every point of a file")
    p.add_argument("checkpoint")
    p.add_argument("points")
    p.add_argument("--out", required=True)
    p.add_argument("--no-probabilities", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against labelled points")
    p.add_argument("predictions")
    p.add_argument("truth")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--class-names")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-attention", help="dump one encoder level's attention maps")
    p.add_argument("checkpoint")
    p.add_argument("points")
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def _module_of(exc):
    frames = traceback.extract_tb(exc.__traceback__)
    if not frames:
        return "gacnn"
    return os.path.splitext(os.path.basename(frames[-1].filename))[0]


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (GacnnError, OSError, ValueError) as e:
        message = str(e).replace("\n", " ")
        print(f"gacnn {args.command}: error in {_module_of(e)}: {type(e).__name__}: {message}",
              file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
