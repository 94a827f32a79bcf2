"""Point-cloud ingestion, normalization, nearest-neighbour search and
farthest-point sampling.

Clouds are stored as ``(n, 3)`` float64 arrays. Two on-disk formats are
supported: whitespace separated ``.xyz`` text and ``.ply`` (ASCII or
binary little endian, vertex element with ``x``, ``y``, ``z`` properties).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, EmptyCloud, ParseError

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    points: np.ndarray
    source_bytes: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        self.points = pts

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps scene coordinates ``p`` to ``(p - center) / scale``."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def forward(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def inverse(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    def then(self, other: "NormalizationTransform") -> "NormalizationTransform":
        """Transform equivalent to applying ``self`` and then ``other``."""
        center = np.asarray(self.center) + self.scale * np.asarray(other.center)
        return NormalizationTransform(center=center, scale=self.scale * other.scale)

    def to_text(self) -> str:
        c = ", ".join(repr(float(v)) for v in self.center)
        return f"center = {c}\nscale = {float(self.scale)!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "NormalizationTransform":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        center = np.array([float(v) for v in values["center"].split(",")])
        return cls(center=center, scale=float(values["scale"]))


# ---------------------------------------------------------------------------
# readers / writers
# ---------------------------------------------------------------------------

def _infer_format(path, format):
    if format is not None:
        return format.lower()
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("xyz", "ply"):
        raise ValueError(f"cannot infer point-cloud format from {path!r}")
    return suffix


def load_point_cloud(path, format=None) -> PointCloud:
    """Read a ``.xyz`` or ``.ply`` point cloud, keeping file order."""
    fmt = _infer_format(path, format)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    size = os.path.getsize(path)
    if fmt == "xyz":
        pts = _read_xyz(path)
    elif fmt == "ply":
        pts = _read_ply(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    if len(pts) == 0:
        raise EmptyCloud(f"{path} contains no points")
    return PointCloud(pts, source_bytes=size)


def _read_xyz(path):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 3:
                raise ParseError(lineno, "expected at least 3 columns")
            try:
                xyz = (float(tokens[0]), float(tokens[1]), float(tokens[2]))
            except ValueError:
                raise ParseError(lineno, "non-numeric coordinate") from None
            if not all(np.isfinite(xyz)):
                raise ParseError(lineno, "non-finite coordinate")
            rows.append(xyz)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    # header is ASCII, terminated by the end_header line
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ParseError(len(lines) + 1, "unterminated ply header")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        lines.append(line)
        if line == "end_header":
            break
    if not lines or lines[0] != "ply":
        raise ParseError(1, "missing 'ply' magic")

    fmt = None
    elements = []  # (name, count, [(prop, dtype or None for lists)])
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(lineno, f"unsupported ply format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise ParseError(lineno, "bad element declaration") from None
        elif parts[0] == "property":
            if not elements:
                raise ParseError(lineno, "property before element")
            if len(parts) >= 2 and parts[1] == "list":
                elements[-1][2].append((parts[-1], None))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise ParseError(lineno, f"bad property {line!r}")
        else:
            raise ParseError(lineno, f"unexpected header line {line!r}")
    if fmt is None:
        raise ParseError(2, "missing format line")

    header_lines = len(lines)
    vertex = None
    skip_rows = 0
    skip_bytes = 0
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if any(dt is None for _, dt in props):
            raise ParseError(header_lines, "list-valued element precedes vertex")
        skip_rows += count
        skip_bytes += count * sum(np.dtype(dt).itemsize for _, dt in props)
    if vertex is None:
        raise ParseError(header_lines, "no vertex element")
    count, props = vertex
    names = [p for p, _ in props]
    if not {"x", "y", "z"} <= set(names) or any(dt is None for _, dt in props):
        raise ParseError(header_lines, "vertex element needs scalar x, y, z")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(p, "<" + dt) for p, dt in props])
        start = pos + skip_bytes
        need = count * dtype.itemsize
        if len(data) - start < need:
            raise ParseError(header_lines + 1, "truncated binary vertex data")
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        if not np.isfinite(pts).all():
            bad = int(np.nonzero(~np.isfinite(pts).all(axis=1))[0][0])
            raise ParseError(header_lines + 1 + bad, "non-finite coordinate")
        return pts

    body = data[pos:].decode("ascii", errors="replace").split("\n")
    cols = [names.index(c) for c in ("x", "y", "z")]
    pts = np.empty((count, 3), dtype=np.float64)
    row = 0
    lineno = header_lines
    skipped = 0
    for line in body:
        lineno += 1
        if row >= count:
            break
        tokens = line.split()
        if not tokens:
            continue
        if skipped < skip_rows:
            skipped += 1
            continue
        if len(tokens) < len(names):
            raise ParseError(lineno, "too few vertex properties")
        try:
            pts[row] = [float(tokens[c]) for c in cols]
        except ValueError:
            raise ParseError(lineno, "non-numeric vertex property") from None
        if not np.isfinite(pts[row]).all():
            raise ParseError(lineno, "non-finite coordinate")
        row += 1
    if row < count:
        raise ParseError(lineno, f"expected {count} vertices, found {row}")
    return pts


def save_point_cloud(path, cloud, format=None, binary=True, dtype="f8"):
    """Write a cloud. ``dtype`` ("f4" or "f8") only applies to ply output."""
    fmt = _infer_format(path, format)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if fmt == "xyz":
        with open(path, "w") as fh:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
        return
    if fmt != "ply":
        raise ValueError(f"unknown format {format!r}")
    ply_type = {"f4": "float", "f8": "double"}[dtype]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        f"property {ply_type} x",
        f"property {ply_type} y",
        f"property {ply_type} z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<" + dtype).tobytes())
        else:
            cast = pts.astype(dtype).astype(np.float64)
            fh.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in cast.tolist()).encode("ascii"))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(cloud: PointCloud):
    """Centre on the bounding-box centre and scale by the half diagonal.

    Returns the normalized cloud (inside the unit ball) and the transform.
    """
    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float(np.linalg.norm(hi - lo) / 2.0)
    if scale == 0.0:
        raise DegenerateCloud("all points coincide")
    tf = NormalizationTransform(center=(lo + hi) / 2.0, scale=scale)
    return PointCloud(tf.forward(pts), source_bytes=cloud.source_bytes), tf


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------

def _dist(points, q):
    diff = points - q
    return np.sqrt(np.sum(diff * diff, axis=-1))


class SpatialIndex:
    """Immutable kd-tree over a cloud with exact, index tie-broken queries."""

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self._points = np.array(pts, dtype=np.float64)
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def points(self):
        return self._points

    def __len__(self):
        return len(self._points)

    def query(self, queries, k):
        """Batched k-NN. Returns ``(indices, distances)`` of shape (m, min(k, n)).

        Rows are ordered by distance, ties by ascending point index.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self._points)
        k_eff = min(k, n)
        kk = min(k_eff + 1, n)
        _, idx = self._tree.query(q, k=kk)
        idx = np.asarray(idx).reshape(len(q), kk)
        d = _dist(self._points[idx], q[:, None, :])
        order = np.lexsort((idx, d), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        d = np.take_along_axis(d, order, axis=-1)
        if kk > k_eff:
            # candidates past the tree's cut-off may tie with the last kept one
            suspect = np.nonzero(d[:, k_eff] <= d[:, k_eff - 1] * (1 + 1e-9))[0]
            for r in suspect:
                full = _dist(self._points, q[r])
                o = np.lexsort((np.arange(n), full))[:kk]
                idx[r], d[r] = o, full[o]
        return idx[:, :k_eff], d[:, :k_eff]

    def nearest(self, q, k=1):
        idx, d = self.query(np.asarray(q, dtype=np.float64)[None, :], k)
        return idx[0], d[0]


def knn(index: SpatialIndex, q, k: int):
    """List of ``(point_index, distance)`` for the ``min(k, n)`` nearest points."""
    idx, d = index.nearest(q, k)
    return [(int(i), float(v)) for i, v in zip(idx, d)]


def farthest_point_sample(cloud, m: int, seed: int = 0):
    """Greedy farthest-point subset of ``m`` indices.

    The start index is drawn from ``seed``; later picks maximise the distance to
    the chosen set (ties go to the lowest index).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    start = int(np.random.default_rng(seed).integers(n))
    chosen = [start]
    mind = _dist(pts, pts[start])
    mind[start] = -np.inf
    for _ in range(m - 1):
        j = int(np.argmax(mind))
        chosen.append(j)
        mind = np.minimum(mind, _dist(pts, pts[j]))
        mind[j] = -np.inf
    return chosen
