import math

import numpy as np
import pytest

from occskel import fixtures, occnet, pcio, trainer
from occskel.errors import AllDegenerate, ConfigError, NonFiniteLoss
from occskel.occnet import NetworkArchitecture
from occskel.pcio import PointCloud, SpatialIndex
from occskel.trainer import AdamState, QueryBatch, TrainingConfig

from conftest import toy_params


def small_cfg(**kw):
    base = dict(iterations=30, batch_size=64, hidden_layers=3, hidden_width=16, skip_layer=2,
                sigma_k=8, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


def sphere_cloud(n=400, seed=0):
    c, _ = pcio.normalize(fixtures.make_fixture("sphere", n, seed=seed))
    return c


def random_batch(seed=0, n=24):
    rng = np.random.default_rng(seed)
    return QueryBatch(rng.uniform(-1, 1, (n, 3)), rng.uniform(-1, 1, (n, 3)),
                      rng.uniform(-1.1, 1.1, (n, 3)), rng.uniform(-1, 1, (n, 3)))


def fd_param_grad(f, params, coords, h=1e-6):
    out = []
    for c in coords:
        up = params.flat.copy()
        dn = params.flat.copy()
        up[c] += h
        dn[c] -= h
        out.append((f(params.replace(up)) - f(params.replace(dn))) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-6)


# ---------------------------------------------------------------- batches

def test_noise_scale_two_points():
    idx = SpatialIndex(PointCloud([[0, 0, 0], [1, 0, 0]]))
    assert trainer.noise_scales(idx, 1).tolist() == [1.0, 1.0]


def test_noise_scale_is_kth_neighbour():
    pts = np.random.default_rng(0).standard_normal((60, 3))
    s = trainer.noise_scales(SpatialIndex(pts), 5)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    assert np.allclose(s, np.sort(d, axis=1)[:, 5], rtol=0, atol=0)


def test_anchors_are_exact_nearest_neighbours():
    cloud = sphere_cloud(200)
    idx = SpatialIndex(cloud)
    cfg = small_cfg(batch_size=50)
    rng = np.random.default_rng(1)
    sig = trainer.noise_scales(idx, cfg.sigma_k)
    pts = cloud.points
    for _ in range(1000):
        b = trainer.build_query_batch(cloud, idx, cfg, rng, sig)
        d = np.sum((b.queries[:, None, :] - pts[None]) ** 2, axis=2)
        best = np.lexsort((np.broadcast_to(np.arange(len(pts)), d.shape), d), axis=1)[:, 0]
        assert (b.anchors == pts[best]).all()


def test_batch_shapes_domain_and_determinism():
    cloud = sphere_cloud(300)
    idx = SpatialIndex(cloud)
    cfg = small_cfg(batch_size=128, domain_margin=0.25)
    a = trainer.build_query_batch(cloud, idx, cfg, np.random.default_rng(5))
    b = trainer.build_query_batch(cloud, idx, cfg, np.random.default_rng(5))
    for x, y in zip((a.queries, a.anchors, a.domain_points, a.cloud_points),
                    (b.queries, b.anchors, b.domain_points, b.cloud_points)):
        assert x.shape == (128, 3) and (x == y).all()
    assert np.abs(a.domain_points).max() <= 1.25
    assert np.isin(a.cloud_points.view("f8,f8,f8"), cloud.points.view("f8,f8,f8")).all()


# ---------------------------------------------------------------- sampling loss

def test_sampling_loss_matches_pull_recomputation():
    p = toy_params(0)
    b = random_batch(0)
    loss = trainer.sampling_loss(p, b)
    pulled = occnet.single_pull(p, b.queries)
    ref = np.mean(np.sum((pulled - b.anchors) ** 2, axis=1))
    assert loss.value == pytest.approx(ref, rel=1e-12)
    assert loss.skipped == 0


def test_sampling_loss_zero_on_surface():
    p = toy_params(1, width=16)
    X, conv, _ = occnet.project_batch(p, np.random.default_rng(2).uniform(-1, 1, (300, 3)), 40)
    on = X[conv]
    assert len(on) > 10
    b = QueryBatch(on, on, on, on)
    assert trainer.sampling_loss(p, b).value < 1e-8


def test_sampling_loss_skips_degenerate():
    p = occnet.zero_final_layer(toy_params(2))
    with pytest.raises(AllDegenerate):
        trainer.sampling_loss(p, random_batch(1))


@pytest.mark.parametrize("seed", range(4))
def test_sampling_loss_parameter_gradient(seed):
    p = toy_params(seed, width=8)
    b = random_batch(seed)
    coords = np.random.default_rng(seed).choice(p.arch.param_count, 20, replace=False)
    g = trainer.sampling_loss(p, b).grad[coords]
    fd = fd_param_grad(lambda q: trainer.sampling_loss(q, b).value, p, coords)
    assert rel_err(g, fd).max() < 1e-3


def test_sampling_loss_query_gradient():
    p = toy_params(5, width=8)
    b = random_batch(5, n=6)
    qg = trainer.sampling_loss(p, b, want_query_grad=True).query_grad
    h = 1e-6
    for i in range(len(b.queries)):
        for a in range(3):
            up, dn = b.queries.copy(), b.queries.copy()
            up[i, a] += h
            dn[i, a] -= h
            fd = (trainer.sampling_loss(p, QueryBatch(up, b.anchors, b.domain_points, b.cloud_points)).value
                  - trainer.sampling_loss(p, QueryBatch(dn, b.anchors, b.domain_points, b.cloud_points)).value) / (2 * h)
            assert abs(qg[i, a] - fd) <= 1e-3 * max(abs(fd), 1e-6)


# ---------------------------------------------------------------- entropy

def test_binary_entropy_values():
    assert trainer.binary_entropy(np.array([0.5]))[0] == pytest.approx(math.log(2))
    assert trainer.binary_entropy(np.array([1.0, 0.0])).max() < 2e-6


def test_entropy_constant_field_zero():
    p = occnet.zero_final_layer(toy_params(3))
    assert trainer.entropy_loss(p, random_batch(2)).value == 0.0


def test_entropy_saturated_cloud():
    # one hidden unit that only switches on far beyond the sampling box
    arch = NetworkArchitecture(1, 1, None, 10.0)
    flat = np.array([50.0, 0, 0, -60.0, 1.0, 0.0])
    p = occnet.NetworkParameters(arch, flat)
    rng = np.random.default_rng(0)
    b = QueryBatch(np.zeros((1, 3)), np.zeros((1, 3)), rng.uniform(-1.1, 1.1, (200, 3)),
                   np.tile([[3.0, 0, 0]], (10, 1)))
    assert trainer.entropy_loss(p, b).value == pytest.approx(math.log(2), abs=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_entropy_parameter_gradient(seed):
    p = toy_params(seed + 10, width=8)
    b = random_batch(seed + 10)
    coords = np.random.default_rng(seed).choice(p.arch.param_count, 20, replace=False)
    g = trainer.entropy_loss(p, b).grad[coords]
    fd = fd_param_grad(lambda q: trainer.entropy_loss(q, b).value, p, coords)
    assert rel_err(g, fd).max() < 1e-3


# ---------------------------------------------------------------- total loss

def test_total_loss_lambda_zero_is_sampling_exactly():
    p, b = toy_params(4), random_batch(3)
    t = trainer.total_loss(p, b, small_cfg(lambda_entropy=0.0))
    s = trainer.sampling_loss(p, b)
    assert t.value == s.value and (t.grad == s.grad).all()


@pytest.mark.parametrize("lam", [1.0, 0.1])
def test_total_loss_combination(lam):
    p, b = toy_params(5), random_batch(4)
    t = trainer.total_loss(p, b, small_cfg(lambda_entropy=lam))
    s, e = trainer.sampling_loss(p, b), trainer.entropy_loss(p, b)
    assert abs(t.value - (s.value + lam * e.value)) <= 1e-12
    assert np.allclose(t.grad, s.grad + lam * e.grad, rtol=0, atol=1e-12)


def test_losses_invariant_under_field_negation():
    p, b = toy_params(6), random_batch(5)
    q = occnet.negate_output(p)
    assert trainer.sampling_loss(q, b).value == pytest.approx(trainer.sampling_loss(p, b).value, rel=1e-12)
    assert trainer.entropy_loss(q, b).value == pytest.approx(trainer.entropy_loss(p, b).value, rel=1e-12)


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_no_move():
    x = np.array([1.0, -2.0, 3.0])
    st = AdamState.zeros(3)
    for _ in range(5):
        x2, st = trainer.adam_update(x, np.zeros(3), st, 1e-3)
        assert (x2 == x).all()


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 10.0, 0.1])
    target = np.array([0.5, -1.0, 2.0])
    x = np.zeros(3)
    st = AdamState.zeros(3)
    # independent recurrence
    xr, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    for t in range(1, 101):
        x, st = trainer.adam_update(x, A @ (x - target), st, lr)
        g = A @ (xr - target)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xr = xr - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert np.abs(x - xr).max() <= 1e-10


def test_lr_schedule():
    cfg = small_cfg(iterations=100, learning_rate=1e-3)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(50) == pytest.approx(5e-4)
    assert cfg.lr_at(100) == pytest.approx(0.0, abs=1e-20)
    assert small_cfg(lr_schedule="constant").lr_at(17) == small_cfg().learning_rate


def test_train_step_deterministic():
    p, b, cfg = toy_params(7), random_batch(6), small_cfg()
    st = AdamState.zeros(p.arch.param_count)
    a = trainer.train_step(p, st, b, cfg)
    c = trainer.train_step(p, st, b, cfg)
    assert a[0].flat.tobytes() == c[0].flat.tobytes()
    assert a[1].t == 1


def test_train_step_non_finite_leaves_params(monkeypatch):
    p, b, cfg = toy_params(8), random_batch(7), small_cfg()
    before = p.flat.copy()
    bad = trainer.TotalLoss(float("nan"), np.zeros(p.arch.param_count), float("nan"), 0.0)
    monkeypatch.setattr(trainer, "total_loss", lambda *a: bad)
    with pytest.raises(NonFiniteLoss):
        trainer.train_step(p, AdamState.zeros(p.arch.param_count), b, cfg)
    assert (p.flat == before).all()


# ---------------------------------------------------------------- fit

@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(learning_rate=0.0), dict(sigma_k=0),
                                 dict(lambda_entropy=-1.0), dict(lr_schedule="step"),
                                 dict(domain_margin=0.0), dict(skip_layer=5)])
def test_config_validation(bad):
    with pytest.raises((ConfigError, Exception)):
        small_cfg(**bad).validate()


def test_fit_zero_iterations():
    cfg = small_cfg(iterations=0)
    p, log = trainer.fit(sphere_cloud(), cfg)
    assert p.flat.tobytes() == occnet.init_network(cfg.architecture(), cfg.seed).flat.tobytes()
    assert log.records == []


def test_fit_deterministic_and_logged():
    cloud = sphere_cloud(300)
    cfg = small_cfg(iterations=25)
    p1, log1 = trainer.fit(cloud, cfg, log_every=10)
    p2, log2 = trainer.fit(cloud, cfg, log_every=10)
    assert occnet.serialize(p1) == occnet.serialize(p2)
    assert [r.iteration for r in log1.records] == [10, 20, 25]
    assert [(r.sampling_loss, r.entropy_loss, r.total_loss) for r in log1.records] == \
        [(r.sampling_loss, r.entropy_loss, r.total_loss) for r in log2.records]
    csv = log1.to_csv().splitlines()
    assert csv[0] == "iteration,loss_samp,loss_entr,loss_total,seconds" and len(csv) == 4


def test_fit_aborts_after_three_non_finite(monkeypatch):
    calls = {"n": 0}
    real = trainer.total_loss

    def flaky(params, batch, cfg):
        calls["n"] += 1
        out = real(params, batch, cfg)
        if calls["n"] > 12:
            return trainer.TotalLoss(float("inf"), out.grad, float("inf"), 0.0)
        return out

    monkeypatch.setattr(trainer, "total_loss", flaky)
    with pytest.raises(NonFiniteLoss) as info:
        trainer.fit(sphere_cloud(200), small_cfg(iterations=50), log_every=5)
    assert [r.iteration for r in info.value.log.records] == [5, 10]
    assert calls["n"] == 15


def test_fit_reduces_loss_and_orients_field():
    cloud = sphere_cloud(500)
    cfg = small_cfg(iterations=300, batch_size=256, hidden_width=32, learning_rate=3e-3)
    p, log = trainer.fit(cloud, cfg, log_every=50)
    assert log.records[-1].total_loss < log.records[0].total_loss
    probes = trainer.boundary_probes(cfg.domain_margin)
    assert occnet.margin_uncertainty(p, probes).mean() > 0
    assert occnet.margin_uncertainty(p, np.zeros(3)) < 0


def test_orient_field_flips_inverted():
    cloud = sphere_cloud(500)
    p, _ = trainer.fit(cloud, small_cfg(iterations=150, batch_size=256, learning_rate=3e-3))
    inv = occnet.negate_output(p)
    fixed, flipped = trainer.orient_field(inv, 0.1)
    assert flipped and fixed.flat.tobytes() == p.flat.tobytes()
    same, flipped = trainer.orient_field(p, 0.1)
    assert not flipped and same is p
