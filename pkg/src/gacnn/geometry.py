"""Spatial kernels on point clouds: neighbours, sampling, density, interpolation, tiling.

Everything here is deterministic numpy. Distances are computed in float64
as sums of squared coordinate differences; ties in any ordering are broken
by ascending point index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

GAUSS_NORM_3D = (2.0 * np.pi) ** -1.5


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    feature_names: tuple = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if n < 1:
            raise ParameterError("point cloud is empty")
        if not np.all(np.isfinite(self.coords)):
            raise ParameterError("point cloud has non-finite coordinates")
        if self.features is None:
            self.features = np.zeros((n, 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if len(self.features) != n:
            raise ParameterError(f"{len(self.features)} feature rows for {n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ParameterError(f"{self.labels.shape[0]} labels for {n} points")
        self.feature_names = tuple(self.feature_names)

    def __len__(self):
        return len(self.coords)

    @property
    def num_features(self):
        return self.features.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        return PointCloud(
            self.coords[index],
            self.features[index],
            None if self.labels is None else self.labels[index],
            self.feature_names,
        )


@dataclass
class KnnGraph:
    indices: np.ndarray

    @property
    def k(self):
        return self.indices.shape[1]

    def __len__(self):
        return len(self.indices)


@dataclass
class DensityField:
    values: np.ndarray
    bandwidth: float


def _coords(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.coords
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def nearest(points, queries, k, exclude_self=False, chunk=512):
    """Indices of the ``k`` nearest ``points`` for every query row.

    With ``exclude_self`` the queries are the points themselves and row
    ``i`` never contains ``i``. Returns ``(indices, squared_distances)``.
    """
    points, queries = _coords(points), _coords(queries)
    n = len(points)
    idx_out = np.empty((len(queries), k), dtype=np.int64)
    d_out = np.empty((len(queries), k))
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        d = ((q[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        rows = np.arange(len(q))
        if exclude_self:
            d[rows, start + rows] = np.inf
        if k < n:
            cand = np.argpartition(d, k - 1, axis=1)[:, :k]
        else:
            cand = np.broadcast_to(np.arange(n), (len(q), n)).copy()
        cand_d = np.take_along_axis(d, cand, axis=1)
        order = np.lexsort((cand, cand_d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        cand_d = np.take_along_axis(cand_d, order, axis=1)
        # rows where the k-th distance is shared with an unselected point
        kth = cand_d[:, -1:]
        crowded = np.flatnonzero((d <= kth).sum(axis=1) > k)
        for r in crowded:
            pool = np.flatnonzero(d[r] <= kth[r, 0])
            pick = pool[np.lexsort((pool, d[r, pool]))[:k]]
            cand[r], cand_d[r] = pick, d[r, pick]
        idx_out[start:start + len(q)] = cand
        d_out[start:start + len(q)] = cand_d
    return idx_out, d_out


def knn_graph(cloud, k):
    """Exact K-nearest-neighbour graph, self excluded."""
    pts = _coords(cloud)
    if k < 1 or k >= len(pts):
        raise ParameterError(f"K must satisfy 1 <= K < N (K={k}, N={len(pts)})")
    idx, _ = nearest(pts, pts, k, exclude_self=True)
    return KnnGraph(idx)


def farthest_point_sample(cloud, m, seed_index=0):
    """Greedy farthest-first selection of ``m`` indices starting at ``seed_index``."""
    pts = _coords(cloud)
    n = len(pts)
    if m < 1 or m > n:
        raise ParameterError(f"cannot sample {m} of {n} points")
    if not 0 <= seed_index < n:
        raise ParameterError(f"seed index {seed_index} outside [0, {n})")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_d = ((pts - pts[seed_index]) ** 2).sum(1)
    min_d[seed_index] = -1.0
    for t in range(1, m):
        i = int(np.argmax(min_d))
        selected[t] = i
        min_d = np.minimum(min_d, ((pts - pts[i]) ** 2).sum(1))
        min_d[selected[: t + 1]] = -1.0
    return selected


def default_bandwidth(cloud, graph):
    """Mean distance to the K-th neighbour; 1.0 for fully degenerate clouds."""
    pts = _coords(cloud)
    far = pts[graph.indices[:, -1]]
    h = float(np.sqrt(((pts - far) ** 2).sum(1)).mean())
    return h if h > 0 else 1.0


def kde_density(cloud, graph, bandwidth=None):
    """Gaussian kernel density over each point's K neighbours (d = 3).

    ``f(p_i) = sum_j exp(-|p_i - p_ij|^2 / (2 h^2)) / (K h (2 pi)^1.5)``
    """
    pts = _coords(cloud)
    if bandwidth is None:
        bandwidth = default_bandwidth(pts, graph)
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    if graph.indices.max(initial=0) >= len(pts):
        raise ContractError("graph does not belong to this cloud")
    h = float(bandwidth)
    diff = pts[:, None, :] - pts[graph.indices]
    sq = (diff ** 2).sum(-1) / (h * h)
    values = np.exp(-0.5 * sq).sum(1) * (GAUSS_NORM_3D / (graph.k * h))
    # far outliers can underflow; densities stay strictly positive
    values = np.maximum(values, np.finfo(np.float64).tiny)
    return DensityField(values, h)


def idw_weights(src_coords, dst_coords, k=3, power=2.0):
    """Neighbour indices and normalised inverse-distance weights, each ``(N, k)``."""
    src = _coords(src_coords)
    if k < 1 or k > len(src):
        raise ParameterError(f"IDW needs 1 <= k <= M (k={k}, M={len(src)})")
    idx, sq = nearest(src, dst_coords, k)
    w = 1.0 / (np.sqrt(sq) ** power + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


def idw_interpolate(src_coords, src_feats, dst_coords, k=3, power=2.0):
    """Inverse-distance-weighted features at ``dst_coords`` from the ``k`` nearest sources."""
    src_feats = np.asarray(src_feats, dtype=np.float64)
    idx, w = idw_weights(src_coords, dst_coords, k, power)
    return np.einsum("nk,nkc->nc", w, src_feats.reshape(len(src_feats), -1)[idx])


_HORIZONTAL_STEPS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0))


def tile_indices(cloud, tile_x=30.0, tile_y=30.0, tile_z=40.0, min_points=1024):
    """Partition point indices into grid cuboids, merging undersized ones.

    The grid is anchored at the scene's minimum corner; points on the far
    boundary fall in the last cell. A tile with fewer than ``min_points``
    points is folded into its most populated horizontal face neighbour,
    smallest tiles first, until no undersized tile has a neighbour left.
    """
    pts = _coords(cloud)
    if len(pts) == 0:
        raise ParameterError("cannot tile an empty cloud")
    size = np.array([tile_x, tile_y, tile_z], dtype=np.float64)
    if np.any(size <= 0):
        raise ParameterError(f"tile dimensions must be positive, got {tuple(size)}")
    lo = pts.min(0)
    ncell = np.maximum(1, np.ceil((pts.max(0) - lo) / size).astype(np.int64))
    cell = np.minimum(np.floor((pts - lo) / size).astype(np.int64), ncell - 1)
    keys, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    owner = {tuple(key): g for g, key in enumerate(keys.tolist())}
    members = {g: [tuple(key)] for g, key in enumerate(keys.tolist())}
    counts = dict(enumerate(np.bincount(inverse, minlength=len(keys)).tolist()))

    while len(members) > 1:
        small = sorted((g for g in members if counts[g] < min_points),
                       key=lambda g: (counts[g], min(members[g])))
        merged = False
        for g in small:
            near = set()
            for c in members[g]:
                for s in _HORIZONTAL_STEPS:
                    h = owner.get((c[0] + s[0], c[1] + s[1], c[2] + s[2]))
                    if h is not None and h != g:
                        near.add(h)
            if not near:
                continue
            target = min(near, key=lambda h: (-counts[h], min(members[h])))
            for c in members.pop(g):
                owner[c] = target
                members[target].append(c)
            counts[target] += counts.pop(g)
            merged = True
            break
        if not merged:
            break

    group_of_cell = np.array([owner[tuple(key)] for key in keys.tolist()])
    point_group = group_of_cell[inverse]
    order = sorted(members, key=lambda g: min(members[g]))
    return [np.flatnonzero(point_group == g) for g in order]


def tile_scene(cloud, tile_x=30.0, tile_y=30.0, tile_z=40.0, min_points=1024):
    """Split a cloud into cuboid tiles; see :func:`tile_indices`."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    return [cloud.subset(i) for i in tile_indices(cloud, tile_x, tile_y, tile_z, min_points)]
