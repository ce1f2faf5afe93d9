"""Desk-scale attention ablation: six flag variants trained on synthetic scenes.

Each variant is trained from the same seeds on the same scene and scored on
the whole scene. Prints one row per variant with the mean over seeds.

    python scripts/ablation_table.py --steps 200 --seeds 0 1 2
"""
import argparse

import numpy as np

from gacnn import tensor as T
from gacnn.evaluation import ConfusionMatrix
from gacnn.network import GacnnConfig, GacnnModel, forward_logits
from gacnn.synthetic import make_scene
from gacnn.training import TrainConfig, cross_entropy_loss, train

# (label, use_global, use_edge, use_density)
VARIANTS = (
    ("a) no global, no local", False, False, False),
    ("b) global, no local", True, False, False),
    ("c) no global, local", False, True, True),
    ("d) global, local edge", True, True, False),
    ("e) global, local density", True, False, True),
    ("f) global, local", True, True, True),
)


def run(flags, seed, steps, points):
    scene = make_scene(n_points=points, seed=seed)
    g, e, d = flags
    model = GacnnModel.init(GacnnConfig.micro(use_global=g, use_edge=e, use_density=d), seed=seed)
    train(model, [scene], TrainConfig(batch_size=2, points_per_block=1024, steps=steps, rng_seed=seed))
    with T.no_grad():
        logits = forward_logits(model, scene)
    m = ConfusionMatrix(3).accumulate(scene.labels, np.argmax(logits.data, axis=1)).metrics()
    return float(cross_entropy_loss(logits, scene.labels).data), m.oa, m.avg_f1


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--points", type=int, default=4096)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()
    print(f"{'variant':<26} {'loss':>8} {'oa':>7} {'avg_f1':>7}   per-seed loss")
    for label, *flags in VARIANTS:
        rows = [run(flags, s, args.steps, args.points) for s in args.seeds]
        loss, oa, f1 = np.mean(rows, axis=0)
        per_seed = " ".join(f"{r[0]:.4f}" for r in rows)
        print(f"{label:<26} {loss:8.4f} {oa:7.4f} {f1:7.4f}   {per_seed}", flush=True)


if __name__ == "__main__":
    main()
