"""Synthetic point clouds sampled from analytic surfaces."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .pcio import PointCloud

SHAPES = ("sphere", "torus", "tube", "y_tube")

TORUS_R = 0.6
TORUS_r = 0.25
TUBE_RADIUS = 0.1
TUBE_LENGTH = 1.0
Y_ARM_LENGTH = 0.6
Y_ANGLES = np.deg2rad([90.0, 210.0, 330.0])


def fibonacci_sphere(n, seed=0):
    """Near-uniform unit-sphere points (Fibonacci lattice, seeded rotation)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    pts = Rotation.random(random_state=seed).apply(pts)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def random_sphere(n, seed=0):
    """Independent uniform samples on the unit sphere."""
    g = np.random.default_rng(seed).standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def torus(n, seed=0, R=TORUS_R, r=TORUS_r):
    """Area-uniform samples of the torus ``(sqrt(x^2+y^2) - R)^2 + z^2 = r^2``."""
    rng = np.random.default_rng(seed)
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, R + r, m) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        ring = R + r * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], 1)])
    return out[:n]


def _cylinder(rng, m, start, direction, length, radius):
    direction = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0, 0]) if abs(direction[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    t = rng.uniform(0, length, m)
    a = rng.uniform(0, 2 * np.pi, m)
    return (start + t[:, None] * direction
            + radius * (np.cos(a)[:, None] * e1 + np.sin(a)[:, None] * e2))


def tube(n, seed=0, radius=TUBE_RADIUS, length=TUBE_LENGTH):
    """Open cylinder around the z axis, ``z`` in ``[-length/2, length/2]``."""
    rng = np.random.default_rng(seed)
    return _cylinder(rng, n, np.array([0, 0, -length / 2]), np.array([0, 0, 1.0]), length, radius)


def y_arm_directions():
    return np.stack([np.cos(Y_ANGLES), np.sin(Y_ANGLES), np.zeros(3)], axis=1)


def _dist_to_segment(p, a, d, length):
    t = np.clip((p - a) @ d, 0.0, length)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=1)


def _sphere_shell(rng, m, center, radius):
    g = rng.standard_normal((m, 3))
    return center + radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def y_tube(n, seed=0, radius=TUBE_RADIUS, arm=Y_ARM_LENGTH):
    """Surface of the union of three capsules joined at the origin, 120 degrees apart.

    Samples are drawn area-proportionally from each capsule (cylinder plus two
    spherical ends) and kept only if no other part of the union covers them.
    """
    rng = np.random.default_rng(seed)
    dirs = y_arm_directions()
    origin = np.zeros(3)
    cyl_area = 2 * np.pi * radius * arm
    cap_area = 4 * np.pi * radius ** 2
    p_cyl = cyl_area / (cyl_area + 2 * cap_area)
    out = np.empty((0, 3))
    while len(out) < n:
        m = (n - len(out)) // 3 + 16
        for d in dirs:
            k = rng.binomial(m, p_cyl)
            k0 = rng.binomial(m - k, 0.5)
            pts = np.vstack([
                _cylinder(rng, k, origin, d, arm, radius),
                _sphere_shell(rng, k0, origin, radius),
                _sphere_shell(rng, m - k - k0, arm * d, radius),
            ])
            dist = np.stack([_dist_to_segment(pts, origin, e, arm) for e in dirs], 1)
            keep = (dist >= radius * (1 - 1e-9)).all(axis=1)
            out = np.vstack([out, pts[keep]])
    return out[rng.permutation(len(out))[:n]]


def make_fixture(shape, n, noise_sigma=0.0, seed=0) -> PointCloud:
    if n < 1:
        raise ValueError("n must be >= 1")
    if shape == "sphere":
        pts = fibonacci_sphere(n, seed)
    elif shape == "torus":
        pts = torus(n, seed)
    elif shape == "tube":
        pts = tube(n, seed)
    elif shape == "y_tube":
        pts = y_tube(n, seed)
    else:
        raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, 1])
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    return PointCloud(pts)
