"""Curve-skeleton extraction by Laplacian contraction of a point cloud.

Each contraction step solves the stacked least-squares system

    [wl * L ]          [   0    ]
    [  W_H  ]  P'  =   [ W_H  P ]

through its normal equations ``(wl^2 L^T L + W_H^2) P' = W_H^2 P`` with a
Jacobi-preconditioned conjugate gradient. ``L`` is a cotangent Laplacian
built from local Delaunay one-rings, ``wl`` grows geometrically and the
per-point attraction ``W_H`` grows as the one-ring area shrinks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import SolverDiverged
from .pcio import PointCloud, SpatialIndex

COT_CLAMP = 10.0


@dataclass
class ContractionConfig:
    k: int = 16
    wl0_factor: float = 0.1
    wh0: float = 1.0
    s_l: float = 2.0
    wl_cap: float = 2048.0
    wh_cap: float = 1e4
    max_iterations: int = 20
    area_stop_ratio: float = 0.01
    node_spacing: float = 0.05
    cg_tol: float = 1e-8
    rebuild_connectivity: bool = False
    cot_min: float = -COT_CLAMP

    @classmethod
    def keys(cls):
        return list(cls.__dataclass_fields__)


@dataclass
class NeighborhoodGraph:
    n: int
    edges: np.ndarray          # (E, 2), i < j, lexicographically sorted
    triangles: np.ndarray      # (T, 3) unique one-ring triangles, sorted indices
    one_ring: list             # per point: (t_i, 3) fan triangles containing it
    degenerate: np.ndarray     # per point: star-edge fallback used
    bridges: np.ndarray        # (B, 2) edges added to join components
    components: int = 1        # component count before bridging


def _pts(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _unique_edges(e):
    e = np.sort(np.asarray(e, dtype=np.int64).reshape(-1, 2), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0) if len(e) else e.reshape(0, 2)


def _local_fan(P, nbrs, i):
    """Delaunay fan around ``i`` in the PCA plane of its neighbourhood, or None."""
    local = np.unique(np.append(nbrs, i))
    X = P[local] - P[local].mean(axis=0)
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    if s[0] == 0 or s[1] <= 1e-8 * s[0]:
        return None
    uv = X @ vt[:2].T
    try:
        tri = Delaunay(uv).simplices
    except (QhullError, ValueError):
        return None
    me = int(np.searchsorted(local, i))
    fan = tri[(tri == me).any(axis=1)]
    if len(fan) == 0:
        return None
    return local[fan]


def build_neighborhood_graph(cloud, k=16) -> NeighborhoodGraph:
    """k-NN one-rings from local planar Delaunay triangulations.

    Points whose neighbourhood is collinear fall back to star edges. If the
    result is disconnected, components are joined by shortest bridges.
    """
    P = _pts(cloud)
    n = len(P)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    idx, _ = SpatialIndex(P).query(P, k + 1)
    fans, star = [], []
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        nbrs = idx[i][idx[i] != i][:k]
        fan = _local_fan(P, nbrs, i)
        if fan is None:
            degenerate[i] = True
            star.extend((i, j) for j in nbrs)
            fans.append(np.zeros((0, 3), dtype=np.int64))
        else:
            fans.append(fan)
    tris = np.concatenate(fans) if fans else np.zeros((0, 3), dtype=np.int64)
    tris = np.unique(np.sort(tris, axis=1), axis=0) if len(tris) else tris.reshape(0, 3)
    tri_edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
    edges = _unique_edges(np.concatenate([tri_edges, np.array(star, dtype=np.int64).reshape(-1, 2)]))
    one_ring = [np.sort(f, axis=1) if len(f) else f for f in fans]

    ncomp, bridges = _bridge_components(P, edges)
    if len(bridges):
        edges = _unique_edges(np.concatenate([edges, bridges]))
    return NeighborhoodGraph(n, edges, tris, one_ring, degenerate, bridges, ncomp)


def _bridge_components(P, edges):
    n = len(P)
    adj = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    bridges = []
    if ncomp == 1:
        return ncomp, np.zeros((0, 2), dtype=np.int64)
    comp = labels == labels[0]
    for _ in range(ncomp - 1):
        inside = np.nonzero(comp)[0]
        outside = np.nonzero(~comp)[0]
        d, j = cKDTree(P[outside]).query(P[inside], k=1)
        best = int(np.argmin(d))
        a, b = int(inside[best]), int(outside[j[best]])
        bridges.append((min(a, b), max(a, b)))
        comp |= labels == labels[b]
    return ncomp, np.array(bridges, dtype=np.int64)


def one_ring_areas(cloud, graph: NeighborhoodGraph):
    """Total area of each point's fan triangles at the given positions."""
    P = _pts(cloud)
    out = np.zeros(graph.n)
    for i, fan in enumerate(graph.one_ring):
        if len(fan):
            a, b, c = P[fan[:, 0]], P[fan[:, 1]], P[fan[:, 2]]
            out[i] = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()
    return out


def _cot(u, v, lo=-COT_CLAMP):
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    dot = np.sum(u * v, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = dot / cross
    c = np.where(cross > 0, c, np.sign(dot) * COT_CLAMP)
    return np.clip(c, lo, COT_CLAMP)


def _fan_weights(P, graph, lo):
    """Row-wise cotangent weights from each point's own fan."""
    owner = np.concatenate([np.full(len(f), i) for i, f in enumerate(graph.one_ring)] or
                           [np.zeros(0, dtype=np.int64)])
    if not len(owner):
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    T = np.concatenate([f for f in graph.one_ring if len(f)])
    # reorder every triangle as (owner, j, k)
    pos = np.argmax(T == owner[:, None], axis=1)
    j = T[np.arange(len(T)), (pos + 1) % 3]
    k = T[np.arange(len(T)), (pos + 2) % 3]
    pi, pj, pk = P[owner], P[j], P[k]
    cot_k = _cot(pi - pk, pj - pk, lo)
    cot_j = _cot(pi - pj, pk - pj, lo)
    return (np.concatenate([owner, owner]), np.concatenate([j, k]),
            0.5 * np.concatenate([cot_k, cot_j]))


def cotangent_laplacian(cloud, graph: NeighborhoodGraph, cot_min=-COT_CLAMP):
    """Sparse Laplacian with ``L_ij = -(cot a + cot b) / 2`` and zero row sums.

    Each point contributes weights from its own fan only (fans of neighbouring
    points generally disagree, and mixing them skews the Laplacian sideways);
    the two one-sided weights of an edge are then averaged. Cotangents are
    clamped to ``[cot_min, 10]`` and negative summed weights are dropped.
    Points without a fan (star fallback) and bridge edges use the
    inverse-length weight ``mean_edge_length / |e|``.
    """
    P = _pts(cloud)
    n = graph.n
    r, c, w = _fan_weights(P, graph, cot_min)
    E = graph.edges
    has_fan = np.array([len(f) > 0 for f in graph.one_ring], dtype=bool)
    loose = [E[~has_fan[E[:, 0]]], E[~has_fan[E[:, 1]]][:, ::-1]]
    if len(graph.bridges):
        loose += [graph.bridges, graph.bridges[:, ::-1]]
    loose = np.concatenate(loose)
    if len(loose):
        lengths = np.linalg.norm(P[E[:, 0]] - P[E[:, 1]], axis=1)
        mean_len = lengths.mean() if lengths.mean() > 0 else 1.0
        d = np.linalg.norm(P[loose[:, 0]] - P[loose[:, 1]], axis=1)
        lw = mean_len / np.maximum(d, 1e-9 * mean_len)
        r = np.concatenate([r, loose[:, 0]])
        c = np.concatenate([c, loose[:, 1]])
        w = np.concatenate([w, lw])
    W = sp.coo_matrix((w, (r, c)), shape=(n, n)).tocsr()
    W.sum_duplicates()
    W.data = np.maximum(W.data, 0.0)
    W.eliminate_zeros()
    W = ((W + W.T) * 0.5).tocsr()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsr()


# ---------------------------------------------------------------------------
# linear solve
# ---------------------------------------------------------------------------

def normal_matrix(L, wl, wh):
    """``wl^2 L^T L + diag(wh^2)`` as a sparse matrix."""
    return (wl * wl) * (L.T @ L) + sp.diags(np.asarray(wh, dtype=np.float64) ** 2)


def conjugate_gradient(A, b, x0=None, tol=1e-8, max_iter=None):
    """Jacobi-preconditioned CG for SPD ``A``; returns ``(x, relative_residual, iters)``."""
    n = len(b)
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0.0, 0
    dinv = 1.0 / A.diagonal()
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    it = 0
    res = np.linalg.norm(r) / bnorm
    while res > tol and it < max_iter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        res = np.linalg.norm(r) / bnorm
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recompute the true residual; the recursive one drifts
    res = np.linalg.norm(b - A @ x) / bnorm
    return x, res, it


@dataclass
class ContractionState:
    positions: np.ndarray
    wl: float
    wh: np.ndarray
    iteration: int = 0
    areas0: np.ndarray | None = None
    areas: np.ndarray | None = None


def contract_once(state: ContractionState, L, tol=1e-8):
    """Solve one contraction step; returns the new ``(n, 3)`` positions."""
    P = state.positions
    A = normal_matrix(L, state.wl, state.wh)
    B = (np.asarray(state.wh) ** 2)[:, None] * P
    out = np.empty_like(P)
    res = np.empty(3)
    for col in range(3):
        out[:, col], res[col], _ = conjugate_gradient(A, B[:, col], x0=P[:, col], tol=tol)
    worst = float(np.max(res))
    # a NaN residual must count as failure, so test for success
    if not worst <= 1e-4 or not np.isfinite(out).all():
        raise SolverDiverged(f"relative residual {worst:.3g} after CG budget")
    return out


def contraction_energy(P_new, P, L, wl, wh):
    """``|wl L P'|_F^2 + sum_i wh_i^2 |p'_i - p_i|^2``."""
    LP = L @ P_new
    d = np.asarray(P_new) - np.asarray(P)
    return float((wl * wl) * np.sum(LP * LP) + np.sum(np.asarray(wh) ** 2 * np.sum(d * d, axis=1)))


@dataclass
class ContractionResult:
    positions: np.ndarray
    energies: list = field(default_factory=list)
    total_areas: list = field(default_factory=list)
    history: list = field(default_factory=list)
    graph: NeighborhoodGraph | None = None
    diverged: bool = False
    stalled: bool = False


def contract(cloud, cfg: ContractionConfig = ContractionConfig()) -> ContractionResult:
    """Iterated Laplacian contraction with area-driven weight updates.

    Stops when the total one-ring area drops below ``area_stop_ratio`` of the
    initial area, after ``max_iterations`` solves, or when a solve fails to
    shrink the total area (that solve is discarded and ``stalled`` is set).
    ``total_areas[0]`` is the initial area; entry ``t`` is the area after
    solve ``t``.
    """
    P0 = np.array(_pts(cloud), dtype=np.float64)
    if len(P0) < 10:
        raise ValueError("contraction needs at least 10 points")
    graph0 = build_neighborhood_graph(P0, cfg.k)
    result = ContractionResult(P0.copy(), graph=graph0)
    if cfg.max_iterations == 0:
        return result
    graph = graph0
    areas0 = one_ring_areas(P0, graph0)
    mean_area = areas0[areas0 > 0].mean() if (areas0 > 0).any() else 1.0
    safe0 = np.where(areas0 > 0, areas0, mean_area)
    wl = cfg.wl0_factor / math.sqrt(mean_area)
    wh = np.full(len(P0), cfg.wh0)
    state = ContractionState(P0.copy(), wl, wh, 0, areas0, areas0)
    L = cotangent_laplacian(P0, graph, cfg.cot_min)
    total0 = areas0.sum()
    result.total_areas.append(total0)
    for it in range(1, cfg.max_iterations + 1):
        try:
            P1 = contract_once(state, L, cfg.cg_tol)
        except SolverDiverged:
            result.diverged = True
            break
        new_graph = build_neighborhood_graph(P1, cfg.k) if cfg.rebuild_connectivity else graph
        areas = one_ring_areas(P1, new_graph)
        total = areas.sum()
        if not total < result.total_areas[-1]:
            result.stalled = True
            break
        graph = new_graph
        result.energies.append(contraction_energy(P1, state.positions, L, state.wl, state.wh))
        ratio = np.where(areas > 0, safe0 / np.maximum(areas, 1e-300), cfg.wh_cap ** 2)
        wh = np.minimum(cfg.wh0 * np.sqrt(ratio), cfg.wh_cap)
        wl = min(cfg.s_l * state.wl, cfg.wl_cap)
        state = ContractionState(P1, wl, wh, it, areas0, areas)
        result.positions = P1
        result.history.append(state)
        result.total_areas.append(total)
        if total < cfg.area_stop_ratio * total0:
            break
        L = cotangent_laplacian(P1, graph, cfg.cot_min)
    return result


# ---------------------------------------------------------------------------
# skeleton graph
# ---------------------------------------------------------------------------

@dataclass
class SkeletonGraph:
    nodes: np.ndarray
    edges: np.ndarray
    node_members: list

    def degrees(self):
        deg = np.zeros(len(self.nodes), dtype=int)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg


def _find_triangle_edge(adj, nodes):
    """Shortest edge that lies on some 3-cycle, or None."""
    best = None
    for a in range(len(adj)):
        for b in adj[a]:
            if b <= a or not (adj[a] & adj[b]):
                continue
            d = nodes[a] - nodes[b]
            key = (float(d @ d), a, b)
            if best is None or key < best:
                best = key
    return None if best is None else best[1:]


def collapse_triangles(P, members, edges):
    """Merge the endpoints of the shortest triangle edge until the graph has
    no 3-cycles. Merged nodes sit at the mean of their member positions."""
    members = [np.asarray(m, dtype=np.int64) for m in members]
    nodes = np.array([P[m].mean(axis=0) for m in members]).reshape(-1, 3)
    adj = [set() for _ in members]
    for a, b in edges:
        adj[a].add(int(b))
        adj[b].add(int(a))
    alive = np.ones(len(members), dtype=bool)
    while True:
        hit = _find_triangle_edge(adj, nodes)
        if hit is None:
            break
        a, b = hit
        members[a] = np.sort(np.concatenate([members[a], members[b]]))
        members[b] = members[b][:0]
        nodes[a] = P[members[a]].mean(axis=0)
        nodes[b] = np.inf
        for c in adj[b]:
            adj[c].discard(b)
            if c != a:
                adj[c].add(a)
                adj[a].add(c)
        adj[a].discard(b)
        adj[b] = set()
        alive[b] = False
    keep = np.nonzero(alive)[0]
    remap = -np.ones(len(members), dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    out = [(remap[a], remap[b]) for a in keep for b in adj[a] if a < b]
    return nodes[keep], _unique_edges(np.array(out, dtype=np.int64)), [members[i] for i in keep]


def extract_skeleton(contracted, original_graph: NeighborhoodGraph, node_spacing=0.05, seed=0):
    """Nodes by farthest-point sampling the contracted cloud; edges from the
    original neighbourhood graph between points of different nodes.

    Sheet-like leftovers of the contraction show up as triangles in that
    graph; those are removed by shortest-edge collapse.
    """
    P = _pts(contracted)
    n = len(P)
    # farthest-point order, stopped once every point is within node_spacing
    start = int(np.random.default_rng(seed).integers(n))
    chosen = [start]
    diff = P - P[start]
    mind = np.sqrt(np.sum(diff * diff, axis=1))
    mind[start] = -np.inf
    while len(chosen) < n:
        j = int(np.argmax(mind))
        if mind[j] < node_spacing:
            break
        chosen.append(j)
        diff = P - P[j]
        mind = np.minimum(mind, np.sqrt(np.sum(diff * diff, axis=1)))
        mind[j] = -np.inf
    nodes = P[chosen]
    assign, _ = SpatialIndex(nodes).query(P, 1)
    assign = assign[:, 0]
    members = [np.nonzero(assign == m)[0] for m in range(len(nodes))]
    E = original_graph.edges
    a, b = assign[E[:, 0]], assign[E[:, 1]]
    edges = _unique_edges(np.stack([a, b], axis=1)[a != b])
    nodes, edges, members = collapse_triangles(P, members, edges)
    return SkeletonGraph(nodes, edges, members)


def export_skeleton(skel: SkeletonGraph, path):
    try:
        with open(path, "w") as fh:
            fh.write("# skeleton graph\n")
            for x, y, z in np.asarray(skel.nodes, dtype=np.float64).tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b in (np.asarray(skel.edges) + 1).tolist():
                fh.write(f"l {a} {b}\n")
    except OSError as exc:
        raise IOError(f"cannot write skeleton to {path}: {exc}") from exc


def load_skeleton(path) -> SkeletonGraph:
    nodes, edges = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                nodes.append([float(v) for v in parts[1:4]])
            elif parts[0] == "l":
                ids = [int(v) - 1 for v in parts[1:]]
                edges.extend(zip(ids[:-1], ids[1:]))
    return SkeletonGraph(np.array(nodes, dtype=np.float64).reshape(-1, 3),
                         np.array(edges, dtype=np.int64).reshape(-1, 2), [])
