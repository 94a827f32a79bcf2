import numpy as np
import pytest
import scipy.sparse as sp

from occskel import fixtures, skeletor
from occskel.errors import SolverDiverged
from occskel.skeletor import ContractionConfig, ContractionState, SkeletonGraph

SQUARE = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)


def dense_entry(L, i, j):
    return L.toarray()[i, j]


def path_laplacian(n):
    main = np.full(n, 2.0)
    main[[0, -1]] = 1.0
    return sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1]).tocsr()


def laplacian_checks(L):
    d = L.toarray()
    assert np.abs(d.sum(axis=1)).max() <= 1e-9
    assert np.abs(L @ np.ones(L.shape[0])).max() <= 1e-9
    assert ((d != 0) == (d.T != 0)).all()
    assert np.isfinite(d).all()


def dense_solve(state, L):
    A = (state.wl ** 2) * (L.T @ L).toarray() + np.diag(state.wh ** 2)
    return np.linalg.solve(A, (state.wh ** 2)[:, None] * state.positions)


def noisy_sphere(n, seed=0):
    return fixtures.make_fixture("sphere", n, seed=seed).points


# ---------------------------------------------------------------- neighbourhood graph

def test_square_graph():
    g = skeletor.build_neighborhood_graph(SQUARE, 3)
    assert len(g.triangles) == 2 and len(g.edges) == 5
    assert not g.degenerate.any() and len(g.bridges) == 0


def test_collinear_falls_back_to_path():
    line = np.stack([np.linspace(0, 1, 12), np.zeros(12), np.zeros(12)], 1)
    g = skeletor.build_neighborhood_graph(line, 2)
    assert g.degenerate.all() and len(g.triangles) == 0
    assert g.components == 1 and len(g.bridges) == 0
    edges = set(map(tuple, g.edges.tolist()))
    assert all((i, i + 1) in edges for i in range(11))


def test_two_clusters_get_one_bridge():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((40, 3)) * [1, 1, 0.01]
    b = a + [100, 0, 0]
    g = skeletor.build_neighborhood_graph(np.vstack([a, b]), 6)
    assert g.components == 2 and len(g.bridges) == 1
    i, j = g.bridges[0]
    assert (i < 40) != (j < 40)


def test_graph_edges_unique_no_loops():
    g = skeletor.build_neighborhood_graph(noisy_sphere(300), 16)
    e = g.edges
    assert (e[:, 0] < e[:, 1]).all()
    assert len(np.unique(e, axis=0)) == len(e)


def test_too_few_points():
    with pytest.raises(ValueError):
        skeletor.build_neighborhood_graph(SQUARE, 4)


# ---------------------------------------------------------------- laplacian

def test_square_laplacian_values():
    # the right angles opposite the diagonal have zero cotangent; every side
    # sits opposite one 45 degree angle
    g = skeletor.build_neighborhood_graph(SQUARE, 3)
    L = skeletor.cotangent_laplacian(SQUARE, g)
    diag = [e for e in g.edges.tolist() if e in ([0, 2], [1, 3])]
    assert len(diag) == 1
    diag = diag[0]
    assert dense_entry(L, *diag) == pytest.approx(0.0, abs=1e-12)
    for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        assert dense_entry(L, i, j) == pytest.approx(-0.5)
    laplacian_checks(L)


def test_parallelogram_shared_edge_minus_one():
    # both angles opposite the shared edge AB are 45 degrees
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, -1, 0]], dtype=float)
    g = skeletor.build_neighborhood_graph(P, 3)
    assert [0, 1] in g.edges.tolist()
    L = skeletor.cotangent_laplacian(P, g)
    assert dense_entry(L, 0, 1) == pytest.approx(-1.0)


@pytest.mark.parametrize("shape", fixtures.SHAPES)
def test_laplacian_identities_on_fixtures(shape):
    P = fixtures.make_fixture(shape, 400, seed=1).points
    g = skeletor.build_neighborhood_graph(P, 16)
    laplacian_checks(skeletor.cotangent_laplacian(P, g))


def test_laplacian_with_star_and_bridge_edges():
    rng = np.random.default_rng(2)
    line = np.stack([np.linspace(0, 1, 15), np.zeros(15), np.zeros(15)], 1)
    blob = rng.standard_normal((30, 3)) * [0.2, 0.2, 0.002] + [5, 0, 0]
    P = np.vstack([line, blob])
    g = skeletor.build_neighborhood_graph(P, 5)
    assert g.degenerate[:15].all() and len(g.bridges) >= 1
    L = skeletor.cotangent_laplacian(P, g)
    laplacian_checks(L)
    for i, j in g.bridges:
        assert dense_entry(L, i, j) < 0


# ---------------------------------------------------------------- solve

def test_cg_matches_dense():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((50, 50))
    A = sp.csr_matrix(M @ M.T + 50 * np.eye(50))
    b = rng.standard_normal(50)
    x, res, _ = skeletor.conjugate_gradient(A, b, tol=1e-12)
    assert res <= 1e-12 and np.abs(x - np.linalg.solve(A.toarray(), b)).max() < 1e-10


@pytest.mark.parametrize("n,seed", [(200, 0), (500, 1)])
def test_contract_once_matches_dense_solve(n, seed):
    P = noisy_sphere(n, seed)
    g = skeletor.build_neighborhood_graph(P, 16)
    L = skeletor.cotangent_laplacian(P, g)
    areas = skeletor.one_ring_areas(P, g)
    rng = np.random.default_rng(seed)
    st = ContractionState(P, 0.1 / np.sqrt(areas.mean()), rng.uniform(0.5, 3.0, n))
    assert np.abs(skeletor.contract_once(st, L) - dense_solve(st, L)).max() <= 1e-6


def test_contract_once_two_points():
    P = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    L = path_laplacian(2)
    out = skeletor.contract_once(ContractionState(P, 1.0, np.ones(2)), L, tol=1e-14)
    # (2 L + I) x = x0 for this L; x0 = (0, 1) gives x = (2/5, 3/5)
    assert out[:, 0] == pytest.approx([0.4, 0.6], abs=1e-12)


def test_contract_once_weak_laplacian_is_identity():
    P = noisy_sphere(150)
    L = skeletor.cotangent_laplacian(P, skeletor.build_neighborhood_graph(P, 16))
    out = skeletor.contract_once(ContractionState(P, 1e-12, np.ones(len(P))), L)
    assert np.abs(out - P).max() <= 1e-6


def test_contract_once_collinear_stays_on_line():
    t = np.sort(np.random.default_rng(0).uniform(0, 1, 30))
    d = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    P = np.array([0.3, -0.1, 0.2]) + t[:, None] * d
    out = skeletor.contract_once(ContractionState(P, 2.0, np.ones(30)), path_laplacian(30))
    s = np.linalg.svd(out - out.mean(axis=0), compute_uv=False)
    assert s[1] <= 1e-9 * s[0]


def test_contract_once_diverged():
    P = noisy_sphere(60)
    L = skeletor.cotangent_laplacian(P, skeletor.build_neighborhood_graph(P, 8))
    st = ContractionState(P, 1.0, np.full(60, np.nan))
    with pytest.raises(SolverDiverged):
        skeletor.contract_once(st, L)


# ---------------------------------------------------------------- energy

def test_energy_zero_for_constant_cloud():
    P = np.tile([[0.5, 0.5, 0.5]], (5, 1))
    assert skeletor.contraction_energy(P, P, path_laplacian(5), 3.0, np.ones(5)) == 0.0


def test_energy_two_point_hand_values():
    P = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    L = path_laplacian(2)
    assert skeletor.contraction_energy(P, P, L, 1.0, np.ones(2)) == 2.0
    mid = np.full((2, 3), 0.0)
    mid[:, 0] = 0.5
    assert skeletor.contraction_energy(mid, P, L, 1.0, np.ones(2)) == 0.5


def test_solver_output_beats_perturbations():
    P = noisy_sphere(300, 3)
    g = skeletor.build_neighborhood_graph(P, 16)
    L = skeletor.cotangent_laplacian(P, g)
    st = ContractionState(P, 0.5, np.full(len(P), 1.0))
    out = skeletor.contract_once(st, L, tol=1e-12)
    e0 = skeletor.contraction_energy(out, P, L, st.wl, st.wh)
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.standard_normal(out.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert skeletor.contraction_energy(out + d, P, L, st.wl, st.wh) > e0


# ---------------------------------------------------------------- contraction

def test_contract_zero_iterations():
    P = noisy_sphere(100)
    r = skeletor.contract(P, ContractionConfig(max_iterations=0))
    assert (r.positions == P).all() and r.energies == []


def test_contract_needs_ten_points():
    with pytest.raises(ValueError):
        skeletor.contract(SQUARE)


def test_sphere_contracts_to_centroid():
    P = noisy_sphere(2000)
    r = skeletor.contract(P)
    Q = r.positions
    assert np.linalg.norm(Q - Q.mean(axis=0), axis=1).max() < 0.1


def test_tube_contracts_to_axis_small():
    r = skeletor.contract(fixtures.make_fixture("tube", 2000, seed=3))
    Q = r.positions
    assert np.percentile(np.hypot(Q[:, 0], Q[:, 1]), 95) < 0.03


@pytest.mark.parametrize("shape", fixtures.SHAPES)
def test_area_strictly_decreases(shape):
    r = skeletor.contract(fixtures.make_fixture(shape, 1500, seed=2))
    a = np.array(r.total_areas)
    assert len(a) >= 3 and (np.diff(a) < 0).all()
    assert len(r.energies) == len(a) - 1 == len(r.history)
    for st in r.history:
        assert st.wl > 0 and (st.wh > 0).all() and np.isfinite(st.positions).all()


def test_weight_schedule():
    r = skeletor.contract(noisy_sphere(800), ContractionConfig(max_iterations=3))
    wls = [s.wl for s in r.history]
    assert wls[1] == 2 * wls[0] and wls[2] == 2 * wls[1]
    assert all((s.wh <= 1e4).all() for s in r.history)


# ---------------------------------------------------------------- skeleton

def _line_points(n=200):
    return np.stack([np.linspace(0, 1, n), np.zeros(n), np.zeros(n)], 1)


def test_line_skeleton_is_short_path():
    P = _line_points()
    g = skeletor.build_neighborhood_graph(P, 4)
    sk = skeletor.extract_skeleton(P, g, node_spacing=0.2, seed=0)
    assert 4 <= len(sk.nodes) <= 7
    assert sk.degrees().max() <= 2 and len(sk.edges) == len(sk.nodes) - 1


def test_all_points_in_one_place():
    P0 = noisy_sphere(100)
    g = skeletor.build_neighborhood_graph(P0, 8)
    sk = skeletor.extract_skeleton(np.zeros((100, 3)), g, 0.05)
    assert len(sk.nodes) == 1 and len(sk.edges) == 0
    assert sk.node_members[0].tolist() == list(range(100))


def test_members_partition_and_edges_valid():
    P = fixtures.make_fixture("tube", 1500, seed=1).points
    r = skeletor.contract(P)
    sk = skeletor.extract_skeleton(r.positions, r.graph, 0.05, seed=3)
    allm = np.sort(np.concatenate(sk.node_members))
    assert allm.tolist() == list(range(len(P)))
    e = sk.edges
    assert (e[:, 0] != e[:, 1]).all() and len(np.unique(np.sort(e, 1), axis=0)) == len(e)


def test_skeleton_deterministic():
    P = fixtures.make_fixture("y_tube", 1500, seed=0).points
    r = skeletor.contract(P)
    a = skeletor.extract_skeleton(r.positions, r.graph, 0.05, seed=1)
    b = skeletor.extract_skeleton(r.positions, r.graph, 0.05, seed=1)
    assert a.nodes.tobytes() == b.nodes.tobytes() and (a.edges == b.edges).all()


def test_collapse_triangle():
    P = np.array([[0, 0, 0], [1, 0, 0], [0.5, 0.1, 0], [3, 0, 0]], dtype=float)
    nodes, edges, members = skeletor.collapse_triangles(
        P, [[0], [1], [2], [3]], np.array([[0, 1], [1, 2], [0, 2], [1, 3]]))
    assert len(nodes) == 3 and len(edges) == 2
    assert sorted(len(m) for m in members) == [1, 1, 2]


# ---------------------------------------------------------------- files

def test_export_two_nodes(tmp_path):
    sk = SkeletonGraph(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0, 1]]), [])
    skeletor.export_skeleton(sk, tmp_path / "s.obj")
    lines = (tmp_path / "s.obj").read_text().splitlines()
    assert [l.split()[0] for l in lines[1:]] == ["v", "v", "l"] and lines[-1] == "l 1 2"


def test_export_empty(tmp_path):
    sk = SkeletonGraph(np.zeros((0, 3)), np.zeros((0, 2), dtype=int), [])
    skeletor.export_skeleton(sk, tmp_path / "e.obj")
    assert all(l.startswith("#") for l in (tmp_path / "e.obj").read_text().splitlines())
    assert len(skeletor.load_skeleton(tmp_path / "e.obj").nodes) == 0


def test_round_trip_y_skeleton(tmp_path):
    r = skeletor.contract(fixtures.make_fixture("y_tube", 1500, seed=0))
    sk = skeletor.extract_skeleton(r.positions, r.graph, 0.05)
    skeletor.export_skeleton(sk, tmp_path / "y.obj")
    back = skeletor.load_skeleton(tmp_path / "y.obj")
    assert (back.edges == sk.edges).all() and back.nodes.tobytes() == sk.nodes.tobytes()


def test_export_unwritable(tmp_path):
    sk = SkeletonGraph(np.zeros((1, 3)), np.zeros((0, 2), dtype=int), [])
    with pytest.raises(IOError):
        skeletor.export_skeleton(sk, tmp_path / "no" / "s.obj")
