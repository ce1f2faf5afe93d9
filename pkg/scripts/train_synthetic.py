"""Train the micro network on a synthetic ground/wall/canopy scene and report scores.

    python scripts/train_synthetic.py --steps 200 --points 4096 --seed 0
"""
import argparse
import logging
import time

import numpy as np

from gacnn import tensor as T
from gacnn.config import RunConfig
from gacnn.data_io import save_checkpoint
from gacnn.evaluation import ConfusionMatrix, format_report
from gacnn.network import GacnnConfig, GacnnModel, forward_logits
from gacnn.synthetic import make_scene
from gacnn.training import TrainConfig, cross_entropy_loss, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--points", type=int, default=4096)
    parser.add_argument("--block", type=int, default=1024)
    parser.add_argument("--batch", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-global", action="store_true")
    parser.add_argument("--no-edge-attn", action="store_true")
    parser.add_argument("--no-density-attn", action="store_true")
    parser.add_argument("--out", help="optional checkpoint path")
    parser.add_argument("--verbose", action="store_true", help="log every training step")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    scene = make_scene(n_points=args.points, seed=args.seed)
    config = GacnnConfig.micro(use_global=not args.no_global, use_edge=not args.no_edge_attn,
                               use_density=not args.no_density_attn)
    model = GacnnModel.init(config, seed=args.seed)
    train_cfg = TrainConfig(batch_size=args.batch, points_per_block=args.block, steps=args.steps,
                            rng_seed=args.seed)
    start = time.perf_counter()
    _, records = train(model, [scene], train_cfg)
    elapsed = time.perf_counter() - start

    with T.no_grad():
        logits = forward_logits(model, scene)
    loss = float(cross_entropy_loss(logits, scene.labels).data)
    cm = ConfusionMatrix(3).accumulate(scene.labels, np.argmax(logits.data, axis=1))
    print(f"trained {args.steps} steps in {elapsed:.1f}s; first step loss {records[0].loss:.4f}")
    print(f"scene loss {loss:.6f}")
    print(format_report(cm.metrics(), ("ground", "wall", "canopy")))
    if args.out:
        save_checkpoint(model, args.out, RunConfig(network=config, training=train_cfg))
        print(f"saved {args.out}")


if __name__ == "__main__":
    main()
