"""Encoder-decoder classifier built from graph attention convolution modules.

The geometric scaffolding of a forward pass (sampled indices, neighbour
graphs, densities, interpolation weights) depends only on coordinates, so
it is computed once per cloud by :func:`build_hierarchy` and reused by
the differentiable part in :func:`encode` and :func:`decode`.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import GacModuleParams, gac_forward
from .errors import ConfigurationError, ContractError, ParameterError
from .geometry import (
    PointCloud,
    farthest_point_sample,
    idw_weights,
    kde_density,
    knn_graph,
)
from .tensor import Affine, Tensor

NUM_LEVELS = 4


@dataclass
class GacnnConfig:
    sample_sizes: tuple = (1024, 512, 64, 16)
    encoder_dims: tuple = ((32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512))
    decoder_dims: tuple = ((512, 512), (256, 256), (256, 128), (128, 128))
    k_encoder: int = 32
    k_decoder: int = 16
    num_classes: int = 9
    input_feature_count: int = 2
    use_global: bool = True
    use_edge: bool = True
    use_density: bool = True
    idw_k: int = 3
    idw_power: float = 2.0
    fps_seed_index: int = 0
    kde_bandwidth: float | None = None

    def __post_init__(self):
        self.sample_sizes = tuple(int(s) for s in self.sample_sizes)
        self.encoder_dims = tuple(tuple(int(c) for c in d) for d in self.encoder_dims)
        self.decoder_dims = tuple(tuple(int(c) for c in d) for d in self.decoder_dims)
        if len(self.sample_sizes) != NUM_LEVELS or len(self.encoder_dims) != NUM_LEVELS \
                or len(self.decoder_dims) != NUM_LEVELS:
            raise ConfigurationError(f"exactly {NUM_LEVELS} encoder and decoder stages are required")
        if any(b >= a for a, b in zip(self.sample_sizes, self.sample_sizes[1:])):
            raise ConfigurationError(f"sample sizes must strictly decrease: {self.sample_sizes}")
        if self.sample_sizes[-1] < 2:
            raise ConfigurationError("every level needs at least 2 points for a neighbour graph")
        if any(len(d) != 3 for d in self.encoder_dims) or any(len(d) != 2 for d in self.decoder_dims):
            raise ConfigurationError("encoder dims are (C1, C2, C3) triples, decoder dims (C2, C3) pairs")
        if any(c < 1 for d in self.encoder_dims + self.decoder_dims for c in d):
            raise ConfigurationError("all layer widths must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.input_feature_count < 0:
            raise ConfigurationError("input_feature_count must be non-negative")
        if self.k_encoder < 1 or self.k_decoder < 1 or self.idw_k < 1:
            raise ConfigurationError("neighbour counts must be positive")
        if self.kde_bandwidth is not None and not self.kde_bandwidth > 0:
            raise ConfigurationError("kde_bandwidth must be positive")

    @classmethod
    def micro(cls, **overrides):
        """Tiny network for gradient checks and quick training runs."""
        base = dict(
            sample_sizes=(16, 8, 4, 2),
            encoder_dims=((4, 4, 8), (4, 8, 8), (8, 8, 8), (8, 8, 8)),
            decoder_dims=((8, 8), (8, 8), (8, 8), (8, 8)),
            k_encoder=4,
            k_decoder=8,
            num_classes=3,
        )
        base.update(overrides)
        return cls(**base)

    def decoder_module_dims(self, stage):
        c2, c3 = self.decoder_dims[stage]
        return (c2, c2, c3)

    def decoder_in_features(self, stage):
        level = NUM_LEVELS - 1 - stage
        coarse = self.encoder_dims[-1][2] if stage == 0 else self.decoder_dims[stage - 1][1]
        skip = self.encoder_dims[level - 1][2] if level >= 1 else self.input_feature_count
        return coarse + skip


@dataclass
class GacnnModel:
    config: GacnnConfig
    encoders: list
    decoders: list
    head: Affine

    @classmethod
    def init(cls, config: GacnnConfig, seed=0):
        rng = np.random.default_rng(seed)
        encoders, width = [], config.input_feature_count
        for dims in config.encoder_dims:
            encoders.append(GacModuleParams.init(
                width, dims, rng, config.use_global, config.use_edge, config.use_density))
            width = dims[2]
        decoders = [
            GacModuleParams.init(config.decoder_in_features(s), config.decoder_module_dims(s), rng,
                                 False, config.use_edge, config.use_density)
            for s in range(NUM_LEVELS)
        ]
        head = Affine.init(config.decoder_dims[-1][1], config.num_classes, rng)
        return cls(config, encoders, decoders, head)

    def named_parameters(self):
        out = []
        for i, m in enumerate(self.encoders):
            out.extend(m.named_parameters(f"encoder{i}."))
        for i, m in enumerate(self.decoders):
            out.extend(m.named_parameters(f"decoder{i}."))
        out.extend(self.head.named_parameters("head"))
        return dict(out)

    def parameters(self):
        return list(self.named_parameters().values())

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.data = p.data.astype(dtype)
        return twin


@dataclass
class Hierarchy:
    """Coordinate-only structure of one forward pass.

    ``coords[t]`` is level ``t`` (0 = input). ``sampled[t]`` indexes level
    ``t - 1``. Encoder graphs/densities live at levels 1..4, decoder ones
    at levels 0..3, and ``interp[t]`` carries features from level ``t + 1``
    down to level ``t``.
    """

    coords: list
    sampled: dict = field(default_factory=dict)
    enc_graph: dict = field(default_factory=dict)
    enc_density: dict = field(default_factory=dict)
    dec_graph: dict = field(default_factory=dict)
    dec_density: dict = field(default_factory=dict)
    interp: dict = field(default_factory=dict)


def center_coords(coords):
    """Shift a block so x/y are centred on their mean and z starts at 0."""
    coords = np.asarray(coords, dtype=np.float64)
    offset = np.array([coords[:, 0].mean(), coords[:, 1].mean(), coords[:, 2].min()])
    return coords - offset


def _graph_and_density(coords, k, bandwidth):
    graph = knn_graph(coords, min(k, len(coords) - 1))
    return graph, kde_density(coords, graph, bandwidth)


def build_hierarchy(config: GacnnConfig, coords):
    coords = center_coords(coords)
    h = Hierarchy([coords])
    for t in range(1, NUM_LEVELS + 1):
        prev = h.coords[t - 1]
        m = config.sample_sizes[t - 1]
        if len(prev) < m:
            raise ParameterError(f"level {t} samples {m} points but only {len(prev)} are available")
        idx = farthest_point_sample(prev, m, config.fps_seed_index)
        h.sampled[t] = idx
        h.coords.append(prev[idx])
        h.enc_graph[t], h.enc_density[t] = _graph_and_density(prev[idx], config.k_encoder,
                                                                config.kde_bandwidth)
    for t in range(NUM_LEVELS):
        pts = h.coords[t]
        h.dec_graph[t], h.dec_density[t] = _graph_and_density(pts, config.k_decoder,
                                                                config.kde_bandwidth)
        src = h.coords[t + 1]
        h.interp[t] = idw_weights(src, pts, min(config.idw_k, len(src)), config.idw_power)
    return h


@dataclass
class Levels:
    """Encoder output: per-level coordinates and feature tensors (level 0 = input)."""

    hierarchy: Hierarchy
    features: list

    @property
    def coords(self):
        return self.hierarchy.coords

    def shapes(self):
        return [tuple(f.shape) for f in self.features]


def _as_cloud(cloud):
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


def _check_features(model, cloud):
    expected = model.config.input_feature_count
    if cloud.num_features != expected:
        raise ConfigurationError(f"model expects {expected} input features, cloud has {cloud.num_features}")


def encode(model: GacnnModel, cloud, hierarchy: Hierarchy | None = None, traces=None):
    """Run the four sampling + attention-convolution stages.

    ``traces``, if a dict, collects each encoder module's intermediates
    keyed by level number.
    """
    cloud = _as_cloud(cloud)
    _check_features(model, cloud)
    h = hierarchy or build_hierarchy(model.config, cloud.coords)
    dtype = model.head.weight.dtype
    feats = [Tensor(cloud.features, dtype=dtype)]
    for t in range(1, NUM_LEVELS + 1):
        trace = None if traces is None else traces.setdefault(t, {})
        f_in = T.gather(feats[t - 1], h.sampled[t])
        feats.append(gac_forward(model.encoders[t - 1], h.coords[t], h.enc_graph[t],
                                 h.enc_density[t], features=f_in, trace=trace))
    return Levels(h, feats)


def _interpolate(x, weights):
    idx, w = weights
    gathered = T.gather(x, idx)  # N x k x C
    return T.sum(T.mul(gathered, Tensor(w[..., None], dtype=x.dtype)), axis=1)


def decode(model: GacnnModel, levels: Levels):
    """Interpolate back up to level 0, returning ``(N, C3)`` point features."""
    h = levels.hierarchy
    if len(levels.features) != NUM_LEVELS + 1 or len(h.coords) != NUM_LEVELS + 1:
        raise ContractError("decode needs the five levels produced by encode")
    for t, f in enumerate(levels.features):
        if f.shape[0] != len(h.coords[t]):
            raise ContractError(f"level {t} has {f.shape[0]} feature rows for {len(h.coords[t])} points")
    x = levels.features[-1]
    for stage in range(NUM_LEVELS):
        t = NUM_LEVELS - 1 - stage
        up = _interpolate(x, h.interp[t])
        joined = T.concat([up, levels.features[t]], axis=-1)
        x = gac_forward(model.decoders[stage], h.coords[t], h.dec_graph[t], h.dec_density[t],
                        features=joined)
    return x


def forward_logits(model: GacnnModel, cloud, hierarchy: Hierarchy | None = None):
    return model.head(decode(model, encode(model, cloud, hierarchy)))


def pad_cloud(cloud: PointCloud, minimum, seed=0):
    """Append resampled duplicates until the cloud has ``minimum`` points."""
    n = len(cloud)
    if n >= minimum:
        return cloud
    extra = np.random.default_rng(seed).choice(n, minimum - n, replace=True)
    return cloud.subset(np.concatenate([np.arange(n), extra]))


def predict(model: GacnnModel, cloud, seed=0):
    """Class probabilities ``(N, num_classes)`` and argmax labels for every input point."""
    cloud = _as_cloud(cloud)
    _check_features(model, cloud)
    n = len(cloud)
    padded = pad_cloud(cloud, model.config.sample_sizes[0], seed)
    with T.no_grad():
        logits = forward_logits(model, padded)
        probs = T.softmax(logits, axis=-1).data[:n]
    return probs, np.argmax(logits.data[:n], axis=1)

