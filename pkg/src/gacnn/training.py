"""Loss, Adam, learning-rate schedule, block sampling and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, ParameterError, TrainingError
from .geometry import PointCloud
from .network import GacnnModel, build_hierarchy, forward_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_halving_interval: int = 3000
    batch_size: int = 8
    points_per_block: int = 8192
    drop_fraction: float = 0.125
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    rng_seed: int = 0
    class_weights: tuple | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.drop_fraction < 1:
            raise ParameterError(f"drop_fraction must lie in [0, 1), got {self.drop_fraction}")
        for name in ("lr_halving_interval", "batch_size", "points_per_block"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ParameterError("epochs and steps must be non-negative")
        if not self.base_lr > 0:
            raise ParameterError("base_lr must be positive")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if any(not w > 0 for w in self.class_weights):
                raise ParameterError("class weights must be positive")

    @property
    def block_size(self):
        return self.points_per_block - math.floor(self.drop_fraction * self.points_per_block)

    def total_steps(self, num_tiles):
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, math.ceil(num_tiles / self.batch_size))


def cross_entropy_loss(logits, labels, class_weights=None):
    """Mean over points of (optionally class-weighted) negative log-likelihood."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"{labels.shape} labels for {n} rows of logits")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if len(bad):
        raise DataError(f"label {labels[bad[0]]} at point {bad[0]} outside [0, {c})")
    picked = T.take_last(T.log_softmax(logits, axis=-1), labels)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (c,):
            raise ConfigurationError(f"{len(w)} class weights for {c} classes")
        picked = T.mul(picked, T.Tensor(w[labels], dtype=logits.dtype))
    return T.scale(T.sum(picked), -1.0 / n)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """Bias-corrected Adam update. Each parameter receives a fresh array."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
    return state


def lr_at(step, config: TrainConfig):
    return config.base_lr / 2 ** (step // config.lr_halving_interval)


def sample_training_block(tile: PointCloud, config: TrainConfig, rng):
    """Draw ``points_per_block`` points, then drop ``drop_fraction`` of them at random."""
    n = len(tile)
    take = config.points_per_block
    idx = rng.choice(n, take, replace=n < take)
    keep = np.sort(rng.choice(take, config.block_size, replace=False))
    return tile.subset(idx[keep])


def accumulate_gradients(model: GacnnModel, blocks, class_weights=None):
    """Mean loss and mean parameter gradients over single-cloud forwards."""
    named = model.named_parameters()
    total = {k: np.zeros(p.shape, dtype=np.float64) for k, p in named.items()}
    losses = []
    for block in blocks:
        if block.labels is None:
            raise DataError("training blocks need labels")
        hierarchy = build_hierarchy(model.config, block.coords)
        with T.Tape() as tape:
            loss = cross_entropy_loss(forward_logits(model, block, hierarchy), block.labels,
                                      class_weights)
        grads = T.backward(tape, loss, named.values())
        for k, p in named.items():
            total[k] += grads[p]
        losses.append(float(loss.data))
    n = len(blocks)
    return float(np.mean(losses)), {k: g / n for k, g in total.items()}


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float

    def __str__(self):
        return f"step={self.step} lr={self.lr:.6g} loss={self.loss:.6f}"


def train(model: GacnnModel, tiles, config: TrainConfig, on_step=None):
    """Optimise ``model`` in place; returns ``(model, records)``.

    Each step draws ``batch_size`` tiles uniformly, samples a block from
    each, averages gradients across them and takes one Adam step.
    ``on_step(record, model)`` is called after every update.
    """
    tiles = list(tiles)
    if not tiles:
        raise ParameterError("training needs at least one tile")
    expected = model.config.input_feature_count
    for tile in tiles:
        if tile.num_features != expected:
            raise ConfigurationError(f"tile has {tile.num_features} features, model expects {expected}")
    rng = np.random.default_rng(config.rng_seed)
    state = AdamState(config.beta1, config.beta2, config.epsilon)
    named = model.named_parameters()
    records = []
    for step in range(config.total_steps(len(tiles))):
        blocks = [sample_training_block(tiles[rng.integers(len(tiles))], config, rng)
                  for _ in range(config.batch_size)]
        loss, grads = accumulate_gradients(model, blocks, config.class_weights)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        lr = lr_at(step, config)
        adam_step(state, named, grads, lr)
        record = StepRecord(step, lr, loss)
        records.append(record)
        log.info("%s", record)
        if on_step is not None:
            on_step(record, model)
    return model, records
