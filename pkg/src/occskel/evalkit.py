"""Reconstruction metrics and the storage report.

Per-point nearest-neighbour distances come from the kd-tree index; the
distances themselves are recomputed as ``sqrt((dx*dx + dy*dy) + dz*dz)`` and
averaged with ``math.fsum`` so the results are reproducible bit-for-bit by a
plain double loop.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import occnet
from .errors import EmptyCloud
from .pcio import PointCloud, SpatialIndex

DEFAULT_SCALE = 100.0


def _pts(c):
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("metric needs non-empty clouds")
    return pts


def directed_sq_distances(a, b):
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    a, b = _pts(a), _pts(b)
    idx, _ = SpatialIndex(b).query(a, 1)
    diff = a - b[idx[:, 0]]
    return (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) + diff[:, 2] * diff[:, 2]


def _mean(values):
    return math.fsum(values.tolist()) / len(values)


@dataclass
class MetricsReport:
    chamfer_l1: float
    chamfer_l2: float
    hausdorff: float
    sample_count: int
    scale_factor: float = DEFAULT_SCALE

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in asdict(self).items())

    def csv_header(self) -> str:
        return ",".join(asdict(self))

    def csv_row(self) -> str:
        return ",".join(str(v) for v in asdict(self).values())


def _directed(a, b):
    d2_ab = directed_sq_distances(a, b)
    d2_ba = directed_sq_distances(b, a)
    return d2_ab, d2_ba


def chamfer_l1(a, b, scale_factor=DEFAULT_SCALE):
    d2_ab, d2_ba = _directed(a, b)
    return (0.5 * _mean(np.sqrt(d2_ab)) + 0.5 * _mean(np.sqrt(d2_ba))) * scale_factor


def chamfer_l2(a, b, scale_factor=DEFAULT_SCALE):
    d2_ab, d2_ba = _directed(a, b)
    return (0.5 * _mean(d2_ab) + 0.5 * _mean(d2_ba)) * scale_factor


def hausdorff(a, b, scale_factor=DEFAULT_SCALE):
    d2_ab, d2_ba = _directed(a, b)
    return max(math.sqrt(d2_ab.max()), math.sqrt(d2_ba.max())) * scale_factor


def metrics_report(a, b, scale_factor=DEFAULT_SCALE) -> MetricsReport:
    """All three metrics from one pair of nearest-neighbour passes."""
    d2_ab, d2_ba = _directed(a, b)
    return MetricsReport(
        chamfer_l1=(0.5 * _mean(np.sqrt(d2_ab)) + 0.5 * _mean(np.sqrt(d2_ba))) * scale_factor,
        chamfer_l2=(0.5 * _mean(d2_ab) + 0.5 * _mean(d2_ba)) * scale_factor,
        hausdorff=max(math.sqrt(d2_ab.max()), math.sqrt(d2_ba.max())) * scale_factor,
        sample_count=len(d2_ab),
        scale_factor=scale_factor,
    )


@dataclass
class CompressionReport:
    cloud_bytes: int
    model_bytes: int

    @property
    def reduction_fraction(self):
        return 1.0 - self.model_bytes / self.cloud_bytes

    def to_text(self) -> str:
        return (f"cloud_bytes: {self.cloud_bytes}\nmodel_bytes: {self.model_bytes}\n"
                f"reduction_fraction: {self.reduction_fraction}\n")


def compression_report(cloud: PointCloud, params) -> CompressionReport:
    """Compare the on-disk cloud size with the serialized field size."""
    if cloud.source_bytes <= 0:
        raise ValueError("cloud.source_bytes must be positive (load the cloud from disk)")
    return CompressionReport(cloud.source_bytes, occnet.model_byte_size(params))
