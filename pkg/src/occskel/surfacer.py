"""Grid evaluation, median isovalue, marching cubes and surface sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import occnet
from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .errors import InsufficientConvergence
from .pcio import PointCloud

DEFAULT_RESOLUTION = 128
BOUNDS_INFLATION = 0.05


@dataclass
class GridField:
    """Samples of a scalar field on a regular lattice.

    ``values[i, j, k]`` is the field at
    ``lo + (hi - lo) * (i, j, k) / (shape - 1)``.
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 samples per axis")

    @property
    def shape(self):
        return self.values.shape

    @property
    def spacing(self):
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    def lattice_point(self, i, j, k):
        return self.lo + self.spacing * np.array([i, j, k], dtype=np.float64)

    def flat_values(self):
        """Values ordered x-fastest."""
        return self.values.ravel(order="F")

    def interpolate(self, points):
        """Trilinear interpolation at points inside the bounds."""
        p = (np.atleast_2d(points) - self.lo) / self.spacing
        n = np.array(self.shape)
        base = np.clip(np.floor(p).astype(int), 0, n - 2)
        f = p - base
        out = np.zeros(len(p))
        for c in CORNERS:
            w = np.prod(np.where(np.array(c) == 1, f, 1.0 - f), axis=1)
            idx = base + np.array(c)
            out += w * self.values[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out


def lattice(lo, hi, resolution):
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if (res < 2).any():
        raise ValueError("resolution must be >= 2")
    axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def evaluate_grid(params, bounds, resolution=DEFAULT_RESOLUTION) -> GridField:
    """Sample the margin uncertainty of ``params`` on a lattice over ``bounds``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    pts = lattice(lo, hi, resolution)
    vals = occnet.margin_uncertainty(params, pts.reshape(-1, 3)).reshape(pts.shape[:3])
    return GridField(lo, hi, vals)


def sample_grid(fn, bounds, resolution) -> GridField:
    """Grid of an arbitrary vectorized scalar function ``fn((N, 3)) -> (N,)``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    pts = lattice(lo, hi, resolution)
    return GridField(lo, hi, np.asarray(fn(pts.reshape(-1, 3))).reshape(pts.shape[:3]))


def reconstruction_bounds(points, inflation=BOUNDS_INFLATION):
    """Bounding box of ``points`` with each half-extent grown by ``inflation``."""
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    c, h = (lo + hi) / 2, (hi - lo) / 2 * (1.0 + inflation)
    return c - h, c + h


def median_threshold(grid) -> float:
    """Exact median of the grid values (mean of the middle pair when even)."""
    v = np.asarray(grid.values if isinstance(grid, GridField) else grid, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty grid")
    n = v.size
    if n % 2:
        return float(np.partition(v, n // 2)[n // 2])
    part = np.partition(v, [n // 2 - 1, n // 2])
    return float((part[n // 2 - 1] + part[n // 2]) / 2.0)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    empty_level_set: bool = False

    def edges(self):
        """Unique undirected edges and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def euler_characteristic(self):
        edges, _ = self.edges()
        return len(self.vertices) - len(edges) + len(self.triangles)

    def is_watertight(self):
        if len(self.triangles) == 0:
            return False
        _, counts = self.edges()
        return bool((counts == 2).all())


# cube edge -> (axis, lattice offset of the lower endpoint)
def _edge_slots():
    slots = []
    for a, b in EDGES:
        ca, cb = np.array(CORNERS[a]), np.array(CORNERS[b])
        axis = int(np.nonzero(ca != cb)[0][0])
        slots.append((axis, tuple(np.minimum(ca, cb))))
    return slots


_EDGE_SLOTS = _edge_slots()
_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _row in enumerate(TRI_TABLE):
    _TRI[_case, :len(_row)] = _row
_NTRI = np.array([len(r) // 3 for r in TRI_TABLE])


def marching_cubes(grid: GridField, iso: float, close_boundary=False) -> TriangleMesh:
    """Triangulate ``{x : field(x) = iso}`` with the 256-case lookup table.

    Lattice points with value ``< iso`` are inside. Vertices are shared between
    cells through their lattice edge, and triangles are wound so that normals
    point toward increasing field values. With ``close_boundary`` the grid is
    padded by one layer of outside values so surfaces cut by the box are capped.
    """
    V = grid.values
    lo, h = grid.lo, grid.spacing
    vmin, vmax = float(V.min()), float(V.max())
    if not vmin < iso < vmax:
        return TriangleMesh(empty_level_set=True)
    if close_boundary:
        V = np.pad(V, 1, constant_values=iso + (vmax - vmin))
        lo = lo - h
    inside = V < iso
    nx, ny, nz = V.shape

    # one vertex per sign-changing lattice edge
    vert_ids = []
    verts = []
    count = 0
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        va, vb = V[tuple(sl_a)], V[tuple(sl_b)]
        cross = inside[tuple(sl_a)] != inside[tuple(sl_b)]
        ids = np.full(cross.shape, -1, dtype=np.int64)
        ii = np.nonzero(cross)
        ids[ii] = np.arange(count, count + len(ii[0]))
        count += len(ii[0])
        t = (iso - va[ii]) / (vb[ii] - va[ii])
        p = np.stack(ii, axis=1).astype(np.float64)
        p[:, axis] += t
        verts.append(lo + p * h)
        vert_ids.append(ids)
    vertices = np.concatenate(verts) if count else np.zeros((0, 3))

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    cells = np.nonzero((case > 0) & (case < 255))
    cases = case[cells]
    ci, cj, ck = cells

    # cube-local edge -> global vertex id, per active cell
    local = np.empty((len(cases), 12), dtype=np.int64)
    for e, (axis, (ox, oy, oz)) in enumerate(_EDGE_SLOTS):
        local[:, e] = vert_ids[axis][ci + ox, cj + oy, ck + oz]

    ntri = _NTRI[cases]
    cell_of_tri = np.repeat(np.arange(len(cases)), ntri)
    slot = np.arange(len(cell_of_tri)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    table = _TRI[cases[cell_of_tri]]
    cols = 3 * slot[:, None] + np.arange(3)
    edges = np.take_along_axis(table, cols, axis=1)
    tris = np.take_along_axis(local[cell_of_tri], edges, axis=1)
    # table winding gives normals toward the inside; flip to point outward
    tris = tris[:, [0, 2, 1]]
    return TriangleMesh(vertices, tris)


# ---------------------------------------------------------------------------
# surface samples
# ---------------------------------------------------------------------------

def sample_surface_points(params, count, seed=0, radius=1.1, max_steps=10, damping=0.8,
                          batch=20000) -> PointCloud:
    """``count`` points on the zero level set, projected from seeds in a ball.

    Non-converged seeds are replaced until ``10 * count`` seeds have been used.
    """
    if count <= 0:
        return PointCloud(np.zeros((0, 3)))
    rng = np.random.default_rng(seed)
    budget = 10 * count
    used = 0
    found = []
    have = 0
    while have < count and used < budget:
        m = min(max(count - have, 1), budget - used, batch)
        d = rng.standard_normal((m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        seeds = d * (radius * rng.uniform(0, 1, m) ** (1.0 / 3.0))[:, None]
        used += m
        pts, ok, _ = occnet.project_batch(params, seeds, max_steps, damping)
        found.append(pts[ok])
        have += int(ok.sum())
    if have < count:
        raise InsufficientConvergence(f"only {have} of {count} seeds converged")
    return PointCloud(np.concatenate(found)[:count])


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def export_mesh(mesh: TriangleMesh, path, format=None):
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    try:
        if fmt == "obj":
            with open(path, "w") as fh:
                for x, y, z in mesh.vertices:
                    fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
                for a, b, c in mesh.triangles + 1:
                    fh.write(f"f {a} {b} {c}\n")
        elif fmt == "ply":
            header = (
                "ply\nformat binary_little_endian 1.0\n"
                f"element vertex {len(mesh.vertices)}\n"
                "property float x\nproperty float y\nproperty float z\n"
                f"element face {len(mesh.triangles)}\n"
                "property list uchar int vertex_indices\nend_header\n"
            )
            faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            faces["n"] = 3
            faces["v"] = mesh.triangles
            with open(path, "wb") as fh:
                fh.write(header.encode("ascii"))
                fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
                fh.write(faces.tobytes())
        else:
            raise ValueError(f"unknown mesh format {fmt!r}")
    except OSError as exc:
        raise IOError(f"cannot write mesh to {path}: {exc}") from exc


def load_mesh(path) -> TriangleMesh:
    """Read meshes written by :func:`export_mesh`."""
    path = str(path)
    if path.lower().endswith(".obj"):
        verts, tris = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                elif parts[0] == "f":
                    tris.append([int(v.split("/")[0]) - 1 for v in parts[1:4]])
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                            np.array(tris, dtype=np.int64).reshape(-1, 3))
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").split("\n")
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in header if l.startswith("element face")).split()[-1])
    v = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=end).reshape(nv, 3)
    faces = np.frombuffer(data, dtype=[("n", "u1"), ("v", "<i4", (3,))], count=nf,
                          offset=end + 12 * nv)
    return TriangleMesh(v.astype(np.float64), faces["v"].astype(np.int64))


def dump_grid(grid: GridField, path):
    """Raw little-endian float32 values (x fastest) plus a ``.txt`` sidecar."""
    with open(path, "wb") as fh:
        fh.write(grid.flat_values().astype("<f4").tobytes())
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"resolution = {' '.join(map(str, grid.shape))}\n")
        fh.write(f"lo = {' '.join(repr(float(v)) for v in grid.lo)}\n")
        fh.write(f"hi = {' '.join(repr(float(v)) for v in grid.hi)}\n")
