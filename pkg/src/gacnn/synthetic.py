"""Labelled toy scenes for tests and desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .data_io import compute_height_above_ground
from .geometry import PointCloud

GROUND, WALL, CANOPY = 0, 1, 2


def make_scene(n_points=4096, seed=0, noise=0.05, extent=20.0):
    """Ground plane, a vertical wall and a spherical canopy; 3 classes.

    Features are ``(intensity, height_above_ground)`` with intensity drawn
    independently of the class, so only geometry separates the classes.
    """
    rng = np.random.default_rng(seed)
    n_wall = n_points // 4
    n_canopy = n_points // 4
    n_ground = n_points - n_wall - n_canopy

    ground = np.column_stack([rng.uniform(0, extent, n_ground), rng.uniform(0, extent, n_ground),
                              np.zeros(n_ground)])
    wall = np.column_stack([np.full(n_wall, 0.25 * extent), rng.uniform(0.1 * extent, 0.9 * extent, n_wall),
                            rng.uniform(0.5, 8.0, n_wall)])
    direction = rng.normal(size=(n_canopy, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    centre = np.array([0.7 * extent, 0.5 * extent, 7.0])
    canopy = centre + 3.0 * direction
    coords = np.concatenate([ground, wall, canopy]) + rng.normal(scale=noise, size=(n_points, 3))
    labels = np.concatenate([np.full(n_ground, GROUND), np.full(n_wall, WALL), np.full(n_canopy, CANOPY)])
    order = rng.permutation(n_points)
    coords, labels = coords[order], labels[order]
    intensity = rng.uniform(0.0, 1.0, n_points)
    height = compute_height_above_ground(coords, cell_size=2.0)
    return PointCloud(coords, np.column_stack([intensity, height]), labels,
                      ("intensity", "height_above_ground"))
