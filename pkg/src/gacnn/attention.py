"""Edge, density and global attention, assembled into the graph attention convolution module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .geometry import DensityField, KnnGraph, PointCloud, _coords
from .tensor import Affine, Tensor


@dataclass
class EdgeAttentionParams:
    layer1: Affine  # 3 -> C1
    layer2: Affine  # C1 -> C2

    def named_parameters(self, prefix):
        yield from self.layer1.named_parameters(f"{prefix}.layer1")
        yield from self.layer2.named_parameters(f"{prefix}.layer2")


@dataclass
class DensityAttentionParams:
    layer1: Affine  # 1 -> C1
    layer2: Affine  # C1 -> 1

    def named_parameters(self, prefix):
        yield from self.layer1.named_parameters(f"{prefix}.layer1")
        yield from self.layer2.named_parameters(f"{prefix}.layer2")


@dataclass
class GlobalAttentionParams:
    layer: Affine  # 3 -> C1

    def named_parameters(self, prefix):
        yield from self.layer.named_parameters(f"{prefix}.layer")


@dataclass
class GacModuleParams:
    """Weights of one graph attention convolution module.

    Edge and density parameters exist whatever the flags say, so a model's
    parameter set depends only on its widths and ``use_global``.
    """

    edge: EdgeAttentionParams
    density: DensityAttentionParams
    global_attn: GlobalAttentionParams | None
    neighbor_mlp: Affine | None
    fuse_mlp: Affine
    out_mlp: Affine
    use_global: bool = True
    use_edge: bool = True
    use_density: bool = True

    @classmethod
    def init(cls, in_features, dims, rng, use_global=True, use_edge=True, use_density=True):
        c1, c2, c3 = dims
        base = 3 + in_features
        return cls(
            edge=EdgeAttentionParams(Affine.init(3, c1, rng), Affine.init(c1, c2, rng)),
            density=DensityAttentionParams(Affine.init(1, c1, rng), Affine.init(c1, 1, rng)),
            global_attn=GlobalAttentionParams(Affine.init(3, c1, rng)) if use_global else None,
            neighbor_mlp=Affine.init(base, c1, rng) if use_global else None,
            fuse_mlp=Affine.init(base + c1 if use_global else base, c2, rng),
            out_mlp=Affine.init(c2, c3, rng),
            use_global=use_global,
            use_edge=use_edge,
            use_density=use_density,
        )

    @property
    def out_features(self):
        return self.out_mlp.fan_out

    def named_parameters(self, prefix=""):
        yield from self.edge.named_parameters(f"{prefix}edge")
        yield from self.density.named_parameters(f"{prefix}density")
        if self.global_attn is not None:
            yield from self.global_attn.named_parameters(f"{prefix}global")
            yield from self.neighbor_mlp.named_parameters(f"{prefix}neighbor_mlp")
        yield from self.fuse_mlp.named_parameters(f"{prefix}fuse_mlp")
        yield from self.out_mlp.named_parameters(f"{prefix}out_mlp")


def edge_features(cloud, graph: KnnGraph):
    """``e_ij = p_i - p_ij`` for every edge, shape ``(N, K, 3)``."""
    pts = _coords(cloud)
    idx = graph.indices
    if idx.shape[0] != len(pts) or idx.min(initial=0) < 0 or idx.max(initial=0) >= len(pts):
        raise ContractError(f"graph over {idx.shape[0]} rows does not index a {len(pts)}-point cloud")
    return pts[:, None, :] - pts[idx]


def edge_attention(params: EdgeAttentionParams, edges):
    """Per-channel softmax over the K neighbours of a two-layer edge MLP."""
    edges = T.as_tensor(edges)
    if edges.ndim != 3 or edges.shape[-1] != 3:
        raise DimensionError(f"edges must be (N, K, 3), got {edges.shape}")
    hidden = params.layer1(edges, "relu")
    logits = params.layer2(hidden)
    return T.softmax(logits, axis=1)


def normalized_inverse_density(density: DensityField, graph: KnnGraph):
    """Neighbour inverse densities divided by their row maximum, values in (0, 1]."""
    values = np.asarray(density.values, dtype=np.float64)
    if np.any(values <= 0):
        raise ContractError("densities must be strictly positive")
    inverse = 1.0 / values[graph.indices]
    return inverse / inverse.max(axis=1, keepdims=True)


def density_attention(params: DensityAttentionParams, density: DensityField, graph: KnnGraph):
    """Density attention weights, shape ``(N, K, 1)``."""
    dn = normalized_inverse_density(density, graph)[..., None]
    return params.layer2(params.layer1(dn, "relu"))


def pairwise_differences(cloud):
    """Signed coordinate differences ``D[i, j] = p_i - p_j``, shape ``(N, N, 3)``."""
    pts = _coords(cloud)
    return pts[:, None, :] - pts[None, :, :]


def normalized_distances(cloud):
    """Softmax of the pairwise differences over ``j``, separately per axis."""
    return T.softmax(Tensor(pairwise_differences(cloud)), axis=1)


def global_attention(params: GlobalAttentionParams, cloud):
    """Global attention weights, shape ``(N, N, C1)``."""
    return params.layer(normalized_distances(cloud))


def _check_widths(params: GacModuleParams, n_feat):
    base = 3 + n_feat
    fuse_in = params.fuse_mlp.fan_in
    c2 = params.fuse_mlp.fan_out
    if params.use_global:
        if params.global_attn is None or params.neighbor_mlp is None:
            raise ConfigurationError("use_global is set but the module has no global attention weights")
        c1 = params.neighbor_mlp.fan_out
        if params.neighbor_mlp.fan_in != base or params.global_attn.layer.fan_out != c1:
            raise ConfigurationError("global attention widths do not match the input features")
        expected = base + c1
    else:
        expected = base
    if fuse_in != expected:
        raise ConfigurationError(f"fuse MLP takes {fuse_in} inputs but the module provides {expected}")
    if params.use_edge and params.edge.layer2.fan_out != c2:
        raise ConfigurationError(
            f"edge attention width {params.edge.layer2.fan_out} differs from fused width {c2}"
        )
    if params.out_mlp.fan_in != c2:
        raise ConfigurationError(f"output MLP takes {params.out_mlp.fan_in} inputs, fused width is {c2}")


def gac_forward(params: GacModuleParams, cloud, graph: KnnGraph, density: DensityField | None = None,
                *, features=None, trace=None):
    """One graph attention convolution: ``(N, 3 + C)`` points to ``(N, C3)`` features.

    ``features`` overrides ``cloud.features`` and may be a tensor carrying
    gradients. When ``trace`` is a dict, intermediate maps are stored in it.
    """
    pts = _coords(cloud)
    if features is None:
        features = cloud.features if isinstance(cloud, PointCloud) else np.zeros((len(pts), 0))
    feats = T.as_tensor(features)
    if feats.ndim != 2 or feats.shape[0] != len(pts):
        raise DimensionError(f"features {feats.shape} do not match {len(pts)} points")
    _check_widths(params, feats.shape[1])
    if params.use_density and density is None:
        raise ConfigurationError("density attention is enabled but no density field was given")
    if len(graph) != len(pts):
        raise ContractError(f"graph has {len(graph)} rows for {len(pts)} points")

    rows = T.concat([Tensor(pts, dtype=feats.dtype), feats], axis=-1)
    neighbors = T.gather(rows, graph.indices)  # N x K x (3+C)
    f1 = neighbors
    if params.use_global:
        mapped = params.neighbor_mlp(neighbors, "relu")  # N x K x C1
        weights = global_attention(params.global_attn, pts)  # N x N x C1
        # per channel c: F_g[:, :, c] = G[:, :, c] @ M[:, :, c]
        f_g = T.transpose(
            T.matmul(T.transpose(weights, (2, 0, 1)), T.transpose(mapped, (2, 0, 1))), (1, 2, 0)
        )
        f1 = T.concat([neighbors, f_g], axis=-1)
        if trace is not None:
            trace["global_weights"] = weights
            trace["global_features"] = f_g
    f = params.fuse_mlp(f1, "relu")
    if trace is not None:
        trace["neighbors"] = neighbors
        trace["fused"] = f
    if params.use_edge:
        e = edge_attention(params.edge, edge_features(pts, graph))
        f = T.mul(e, f)
        if trace is not None:
            trace["edge_weights"] = e
    if params.use_density:
        d = density_attention(params.density, density, graph)
        f = T.mul(d, f)
        if trace is not None:
            trace["density_weights"] = d
    out = T.max_reduce(params.out_mlp(f, "relu"), axis=1)
    if trace is not None:
        trace["output"] = out
    return out
