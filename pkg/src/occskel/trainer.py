"""Fitting an occupancy field to a normalized point cloud.

Each iteration draws a query batch around the cloud, evaluates the pull
loss (distance between the one-step pulled query and its nearest cloud
point) plus a weighted entropy regularizer, and applies one Adam step.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from . import occnet
from .errors import AllDegenerate, ConfigError, NonFiniteLoss
from .occnet import GRAD_EPS, NetworkArchitecture, NetworkParameters
from .pcio import PointCloud, SpatialIndex

ENTROPY_CLAMP = 1e-7
LOG_EVERY = 100


@dataclass
class TrainingConfig:
    iterations: int = 20000
    batch_size: int = 5000
    lambda_entropy: float = 0.1
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine_decay"
    sigma_k: int = 50
    domain_margin: float = 0.1
    seed: int = 0
    hidden_layers: int = 8
    hidden_width: int = 256
    skip_layer: int = 4
    softplus_beta: float = 10.0

    def validate(self):
        for name in ("batch_size", "sigma_k", "hidden_layers", "hidden_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if not self.learning_rate > 0 or not self.domain_margin > 0:
            raise ConfigError("learning_rate and domain_margin must be positive")
        if self.lambda_entropy < 0:
            raise ConfigError("lambda_entropy must be >= 0")
        if self.lr_schedule not in ("constant", "cosine_decay"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.architecture().validate()
        return self

    def architecture(self):
        skip = None if self.skip_layer is None or self.skip_layer <= 0 else int(self.skip_layer)
        return NetworkArchitecture(int(self.hidden_layers), int(self.hidden_width), skip,
                                   float(self.softplus_beta))

    def lr_at(self, step):
        if self.lr_schedule == "constant" or self.iterations == 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.iterations))

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class QueryBatch:
    queries: np.ndarray
    anchors: np.ndarray
    domain_points: np.ndarray
    cloud_points: np.ndarray


@dataclass
class LogRecord:
    iteration: int
    sampling_loss: float
    entropy_loss: float
    total_loss: float
    wall_time: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iteration,loss_samp,loss_entr,loss_total,seconds"]
        for r in self.records:
            lines.append(f"{r.iteration},{r.sampling_loss!r},{r.entropy_loss!r},"
                         f"{r.total_loss!r},{r.wall_time:.3f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def noise_scales(index: SpatialIndex, sigma_k: int):
    """Distance from every cloud point to its ``sigma_k``-th other point."""
    n = len(index)
    k = min(sigma_k, n - 1)
    if k < 1:
        return np.zeros(n)
    _, d = index.query(index.points, k + 1)
    return d[:, k]


def build_query_batch(cloud: PointCloud, index: SpatialIndex, cfg: TrainingConfig,
                      rng: np.random.Generator, sigmas=None) -> QueryBatch:
    pts = cloud.points
    if sigmas is None:
        sigmas = noise_scales(index, cfg.sigma_k)
    B = cfg.batch_size
    pick = rng.integers(len(pts), size=B)
    noise = rng.standard_normal((B, 3)) * sigmas[pick][:, None]
    queries = pts[pick] + noise
    nn, _ = index.query(queries, 1)
    lim = 1.0 + cfg.domain_margin
    domain = rng.uniform(-lim, lim, size=(B, 3))
    return QueryBatch(queries, index.points[nn[:, 0]], domain, pts[pick])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    query_grad: np.ndarray | None = None
    skipped: int = 0


def sampling_loss(params: NetworkParameters, batch: QueryBatch, want_query_grad=False) -> LossValue:
    """Mean squared distance between pulled queries and their anchors.

    Queries whose field gradient is degenerate are dropped from the mean.
    """
    Q = np.asarray(batch.queries, dtype=np.float64)
    P = np.asarray(batch.anchors, dtype=np.float64)
    grad = np.zeros(params.arch.param_count)
    qgrad = np.zeros_like(Q) if want_query_grad else None
    total = 0.0
    count = 0
    for sl in occnet._chunks(len(Q)):
        s, ds, tape = occnet._forward(params, Q[sl], tangents=True)
        o = expit(s)
        U = 1.0 - 2.0 * o
        u1 = -2.0 * o * (1.0 - o)
        u2 = u1 * (1.0 - 2.0 * o)
        g = u1[:, None] * ds
        n = np.linalg.norm(g, axis=1)
        ok = n >= GRAD_EPS
        n = np.where(ok, n, 1.0)
        r = Q[sl] - (U / n)[:, None] * g - P[sl]
        r[~ok] = 0.0
        total += float(np.sum(r * r))
        count += int(ok.sum())
        rbar = 2.0 * r
        gr = np.sum(g * rbar, axis=1)
        U_bar = -gr / n
        g_bar = -U[:, None] * (rbar / n[:, None] - g * (gr / n ** 3)[:, None])
        s_bar = U_bar * u1 + u2 * np.sum(g_bar * ds, axis=1)
        ds_bar = u1[:, None] * g_bar
        gp, xb = occnet._backward(params, tape, s_bar, ds_bar, want_x=want_query_grad)
        grad += gp
        if want_query_grad:
            qgrad[sl] = xb + rbar
    if count == 0:
        raise AllDegenerate("every query has a degenerate field gradient")
    return LossValue(total / count, grad / count,
                     None if qgrad is None else qgrad / count, len(Q) - count)


def binary_entropy(o):
    o = np.clip(o, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    return -o * np.log(o) - (1.0 - o) * np.log(1.0 - o)


def _entropy_term(params, X, weight, grad):
    total = 0.0
    for sl in occnet._chunks(len(X)):
        s, _, tape = occnet._forward(params, X[sl], tangents=False)
        o = expit(s)
        inside = (o >= ENTROPY_CLAMP) & (o <= 1.0 - ENTROPY_CLAMP)
        oc = np.clip(o, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
        total += float(np.sum(-oc * np.log(oc) - (1.0 - oc) * np.log(1.0 - oc)))
        dH = np.where(inside, np.log((1.0 - oc) / oc) * o * (1.0 - o), 0.0)
        gp, _ = occnet._backward(params, tape, weight * dH)
        grad += gp
    return weight * total


def entropy_loss(params: NetworkParameters, batch: QueryBatch) -> LossValue:
    """Mean entropy over the domain samples minus mean entropy on the cloud."""
    D = np.asarray(batch.domain_points, dtype=np.float64)
    C = np.asarray(batch.cloud_points, dtype=np.float64)
    grad = np.zeros(params.arch.param_count)
    value = 0.0
    if len(D):
        value += _entropy_term(params, D, 1.0 / len(D), grad)
    if len(C):
        value += _entropy_term(params, C, -1.0 / len(C), grad)
    return LossValue(value, grad)


@dataclass
class TotalLoss:
    value: float
    grad: np.ndarray
    sampling: float
    entropy: float


def total_loss(params: NetworkParameters, batch: QueryBatch, cfg: TrainingConfig) -> TotalLoss:
    samp = sampling_loss(params, batch)
    if cfg.lambda_entropy == 0:
        return TotalLoss(samp.value, samp.grad, samp.value, 0.0)
    ent = entropy_loss(params, batch)
    lam = cfg.lambda_entropy
    return TotalLoss(samp.value + lam * ent.value, samp.grad + lam * ent.grad,
                     samp.value, ent.value)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_update(x, grad, state: AdamState, lr):
    """Pure Adam step: returns ``(x_new, state_new)``."""
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    x_new = x - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return x_new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def train_step(params, opt_state, batch, cfg):
    """One Adam update on the total loss.

    Raises NonFiniteLoss (leaving inputs untouched) if the loss or its
    gradient is not finite.
    """
    loss = total_loss(params, batch, cfg)
    if not (np.isfinite(loss.value) and np.isfinite(loss.grad).all()):
        raise NonFiniteLoss(f"non-finite loss at step {opt_state.t}")
    flat, state = adam_update(params.flat, loss.grad, opt_state, cfg.lr_at(opt_state.t))
    return params.replace(flat), state, loss


def boundary_probes(margin):
    """Centres of the 6 faces, 12 edges and 8 corners of the sampling box."""
    g = np.array([-1.0, 0.0, 1.0]) * (1.0 + margin)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    return pts[np.any(np.abs(pts) > 0, axis=1)]


def orient_field(params, margin):
    """Make ``U`` positive away from the shape.

    Both losses are unchanged when the logit changes sign, so training can
    settle on either orientation; this picks the one with occupancy 0 on the
    boundary of the sampling box.
    """
    if np.mean(occnet.margin_uncertainty(params, boundary_probes(margin))) < 0:
        return occnet.negate_output(params), True
    return params, False


def fit(cloud: PointCloud, cfg: TrainingConfig, params: NetworkParameters | None = None,
        log_every=LOG_EVERY, progress=None):
    """Fit a field to a normalized cloud; returns ``(params, TrainingLog)``."""
    cfg.validate()
    if params is None:
        params = occnet.init_network(cfg.architecture(), cfg.seed)
    log = TrainingLog()
    if cfg.iterations == 0:
        return params, log
    rng = np.random.default_rng(cfg.seed)
    index = SpatialIndex(cloud)
    sigmas = noise_scales(index, cfg.sigma_k)
    state = AdamState.zeros(params.arch.param_count)
    t0 = time.perf_counter()
    failures = 0
    window = []
    for it in range(1, cfg.iterations + 1):
        batch = build_query_batch(cloud, index, cfg, rng, sigmas)
        try:
            params, state, loss = train_step(params, state, batch, cfg)
        except NonFiniteLoss as exc:
            failures += 1
            if failures >= 3:
                exc.params, exc.log = params, log
                raise
            continue
        failures = 0
        window.append((loss.sampling, loss.entropy, loss.value))
        if it % log_every == 0 or it == cfg.iterations:
            ms, me, mt = np.mean(window, axis=0)
            log.records.append(LogRecord(it, float(ms), float(me), float(mt),
                                         time.perf_counter() - t0))
            window = []
            if progress is not None:
                progress(log.records[-1])
    params, _ = orient_field(params, cfg.domain_margin)
    return params, log
