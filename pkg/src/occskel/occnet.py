"""Coordinate MLP occupancy field.

The network maps a point ``x`` in R^3 to a logit ``s(x)``; occupancy is
``sigmoid(s)`` and the margin uncertainty is ``U = 1 - 2 * occupancy``
(positive outside, negative inside, zero on the surface).

Derivatives are hand-written for this fixed topology. The forward pass
carries the primal activations together with three tangent streams (the
Jacobian of every hidden layer with respect to ``x``), so one pass yields
``s`` and ``grad_x s``. The backward pass propagates adjoints through both
the primal and the tangent streams, which gives exact parameter gradients
of any loss that depends on ``s`` *and* ``grad_x s``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CorruptCheckpoint, DegenerateGradient, InvalidArchitecture

MAGIC = b"OCCF"
FORMAT_VERSION = 1
CHUNK = 2048

SURFACE_TOL = 1e-4
GRAD_EPS = 1e-9


@dataclass(frozen=True)
class NetworkArchitecture:
    hidden_layers: int = 8
    hidden_width: int = 256
    skip_layer: int | None = 4
    beta: float = 10.0

    def validate(self):
        if not isinstance(self.hidden_layers, (int, np.integer)) or self.hidden_layers < 1:
            raise InvalidArchitecture(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if not isinstance(self.hidden_width, (int, np.integer)) or self.hidden_width < 1:
            raise InvalidArchitecture(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.hidden_layers:
            raise InvalidArchitecture(
                f"skip_layer must lie strictly between 0 and {self.hidden_layers}")
        if not self.beta > 0:
            raise InvalidArchitecture("softplus beta must be positive")

    def layer_shapes(self):
        """``(fan_out, fan_in)`` of every linear layer, output layer last."""
        w = self.hidden_width
        shapes = []
        for h in range(1, self.hidden_layers + 1):
            fan_in = 3 if h == 1 else w
            if h == self.skip_layer:
                fan_in += 3
            shapes.append((w, fan_in))
        shapes.append((1, w))
        return shapes

    @property
    def param_count(self):
        return sum(o * i + o for o, i in self.layer_shapes())


@dataclass(frozen=True, eq=False)
class NetworkParameters:
    """Flat float64 parameter vector plus per-layer ``(W, b)`` views."""

    arch: NetworkArchitecture
    flat: np.ndarray
    seed: int = 0
    layers: list = field(init=False, repr=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (self.arch.param_count,):
            raise ValueError(f"expected {self.arch.param_count} parameters, got {flat.shape}")
        if not np.isfinite(flat).all():
            raise ValueError("non-finite parameter")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "layers", _views(flat, self.arch))

    def replace(self, flat):
        return NetworkParameters(self.arch, flat, self.seed)


def _views(flat, arch):
    out = []
    pos = 0
    for o, i in arch.layer_shapes():
        W = flat[pos:pos + o * i].reshape(o, i)
        pos += o * i
        b = flat[pos:pos + o]
        pos += o
        out.append((W, b))
    return out


def init_network(arch: NetworkArchitecture = NetworkArchitecture(), seed: int = 0) -> NetworkParameters:
    """Uniform Glorot weights, zero biases; deterministic in ``seed``."""
    arch.validate()
    rng = np.random.default_rng(seed)
    parts = []
    for o, i in arch.layer_shapes():
        bound = np.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-bound, bound, size=o * i))
        parts.append(np.zeros(o))
    return NetworkParameters(arch, np.concatenate(parts), seed)


def zero_final_layer(params: NetworkParameters) -> NetworkParameters:
    """Copy of ``params`` whose output layer is identically zero (occupancy 0.5)."""
    flat = params.flat.copy()
    o, i = params.arch.layer_shapes()[-1]
    flat[len(flat) - (o * i + o):] = 0.0
    return params.replace(flat)


def negate_output(params: NetworkParameters) -> NetworkParameters:
    """Copy with the output layer negated: logits flip sign, so ``U`` does too."""
    flat = params.flat.copy()
    o, i = params.arch.layer_shapes()[-1]
    flat[len(flat) - (o * i + o):] *= -1.0
    return params.replace(flat)


# ---------------------------------------------------------------------------
# forward / backward engine
# ---------------------------------------------------------------------------

def _softplus(z, beta):
    # log(1 + exp(beta z)) / beta without overflow
    bz = beta * z
    return (np.maximum(bz, 0.0) + np.log1p(np.exp(-np.abs(bz)))) / beta


class _Tape:
    __slots__ = ("inputs", "zs", "acts", "x_stream")


def _forward(params, X, tangents):
    """Returns logits ``s`` (B,), ``grad_x s`` (B, 3) or None, and the tape."""
    arch = params.arch
    beta = arch.beta
    B = len(X)
    if tangents:
        x_stream = np.empty((4, B, 3))
        x_stream[0] = X
        x_stream[1:] = np.eye(3)[:, None, :]
    else:
        x_stream = X[None]
    tape = _Tape()
    tape.inputs, tape.zs, tape.acts = [], [], []
    tape.x_stream = x_stream
    H = x_stream
    for h, (W, b) in enumerate(params.layers[:-1], start=1):
        inp = np.concatenate([H, x_stream], axis=-1) if h == arch.skip_layer else H
        Z = inp @ W.T
        Z[0] += b
        a = expit(beta * Z[0])
        Hn = np.empty_like(Z)
        Hn[0] = _softplus(Z[0], beta)
        if tangents:
            Hn[1:] = a * Z[1:]
        tape.inputs.append(inp)
        tape.zs.append(Z)
        tape.acts.append(a)
        H = Hn
    W, b = params.layers[-1]
    out = H @ W[0]
    tape.inputs.append(H)
    s = out[0] + b[0]
    ds = out[1:].T.copy() if tangents else None
    return s, ds, tape


def _backward(params, tape, s_bar, ds_bar=None, want_x=False):
    """Parameter gradient (flat) and optionally the input adjoint (B, 3)."""
    arch = params.arch
    beta = arch.beta
    grad = np.empty(arch.param_count)
    views = _views(grad, arch)
    tangents = tape.x_stream.shape[0] == 4
    if tangents:
        G = np.empty((4, len(s_bar)))
        G[0] = s_bar
        G[1:] = ds_bar.T if ds_bar is not None else 0.0
    else:
        G = s_bar[None]
    W, _ = params.layers[-1]
    H = tape.inputs[-1]
    gW, gb = views[-1]
    gW[0] = G.reshape(-1) @ H.reshape(-1, H.shape[-1])
    gb[0] = s_bar.sum()
    Hbar = G[..., None] * W[0]
    x_bar = np.zeros((len(s_bar), 3)) if want_x else None
    for layer in range(arch.hidden_layers - 1, -1, -1):
        W, _ = params.layers[layer]
        Z, a, inp = tape.zs[layer], tape.acts[layer], tape.inputs[layer]
        Zbar = np.empty_like(Z)
        Zbar[0] = Hbar[0] * a
        if tangents:
            da = beta * a * (1.0 - a)
            Zbar[0] += da * np.einsum("sbw,sbw->bw", Hbar[1:], Z[1:])
            Zbar[1:] = Hbar[1:] * a
        gW, gb = views[layer]
        gW[...] = Zbar.reshape(-1, Z.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
        gb[...] = Zbar[0].sum(axis=0)
        if layer == 0 and not want_x:
            break
        in_bar = Zbar @ W
        if layer + 1 == arch.skip_layer:
            if want_x:
                x_bar += in_bar[0, :, -3:]
            in_bar = in_bar[..., :-3]
        if layer == 0:
            x_bar += in_bar[0]
        Hbar = in_bar
    return grad, x_bar


def _chunks(n, size=CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def logits(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X))
    for sl in _chunks(len(X)):
        out[sl] = _forward(params, X[sl], tangents=False)[0]
    return out


def logits_and_grad(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s = np.empty(len(X))
    ds = np.empty((len(X), 3))
    for sl in _chunks(len(X)):
        s[sl], ds[sl], _ = _forward(params, X[sl], tangents=True)
    return s, ds


# ---------------------------------------------------------------------------
# field queries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldEvaluation:
    occupancy: np.ndarray
    uncertainty: np.ndarray
    gradient: np.ndarray


def occupancy(params: NetworkParameters, x):
    """Occupancy probability at one point (3,) or a batch (B, 3)."""
    x = np.asarray(x, dtype=np.float64)
    o = expit(logits(params, x))
    return float(o[0]) if x.ndim == 1 else o


def margin_uncertainty(params: NetworkParameters, x):
    """``P(outside) - P(inside) = 1 - 2 * occupancy``."""
    x = np.asarray(x, dtype=np.float64)
    u = 1.0 - 2.0 * expit(logits(params, x))
    return float(u[0]) if x.ndim == 1 else u


def evaluate(params: NetworkParameters, x) -> FieldEvaluation:
    """Occupancy, uncertainty and ``grad_x U`` for a batch of points."""
    s, ds = logits_and_grad(params, x)
    o = expit(s)
    grad_o = (o * (1.0 - o))[:, None] * ds
    return FieldEvaluation(occupancy=o, uncertainty=1.0 - 2.0 * o, gradient=-2.0 * grad_o)


def occupancy_gradient(params: NetworkParameters, x):
    x = np.asarray(x, dtype=np.float64)
    s, ds = logits_and_grad(params, x)
    o = expit(s)
    g = (o * (1.0 - o))[:, None] * ds
    return g[0] if x.ndim == 1 else g


def spatial_gradient(params: NetworkParameters, x):
    """Exact ``grad_x U`` at one point or a batch."""
    x = np.asarray(x, dtype=np.float64)
    g = -2.0 * occupancy_gradient(params, x)
    return g


def _pull(U, g, Q):
    norm = np.linalg.norm(g, axis=-1)
    ok = norm >= GRAD_EPS
    safe = np.where(ok, norm, 1.0)
    return Q - (U / safe)[:, None] * g, ok


def single_pull(params: NetworkParameters, q):
    """One pull step ``q - U(q) * grad U(q) / |grad U(q)|``.

    Raises DegenerateGradient for a single point with vanishing gradient. For a
    batch, degenerate rows are returned unchanged; use :func:`single_pull_batch`
    to get the validity mask.
    """
    q = np.asarray(q, dtype=np.float64)
    pulled, ok = single_pull_batch(params, np.atleast_2d(q))
    if q.ndim == 1:
        if not ok[0]:
            raise DegenerateGradient(f"|grad U| < {GRAD_EPS} at {q}")
        return pulled[0]
    return pulled


def single_pull_batch(params, Q):
    ev = evaluate(params, Q)
    pulled, ok = _pull(ev.uncertainty, ev.gradient, Q)
    return np.where(ok[:, None], pulled, Q), ok


def project_batch(params, Q, max_steps=10, damping=0.8):
    """Damped Newton projection of many seeds onto ``U = 0``.

    Returns ``(points, converged, steps)``. Points with a degenerate gradient
    stop at their last valid iterate and are reported as not converged.
    """
    X = np.array(np.atleast_2d(Q), dtype=np.float64)
    n = len(X)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=int)
    for it in range(max_steps + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        ev = evaluate(params, X[idx])
        done = np.abs(ev.uncertainty) < SURFACE_TOL
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_steps:
            break
        keep = ~done
        idx, U, g = idx[keep], ev.uncertainty[keep], ev.gradient[keep]
        gn2 = np.sum(g * g, axis=1)
        bad = np.sqrt(gn2) < GRAD_EPS
        active[idx[bad]] = False
        idx, U, g, gn2 = idx[~bad], U[~bad], g[~bad], gn2[~bad]
        X[idx] -= (damping * U / gn2)[:, None] * g
        steps[idx] += 1
    return X, converged, steps


def project_to_surface(params: NetworkParameters, q, max_steps=10, damping=0.8):
    """Project one point; returns ``(point, converged)``."""
    X, conv, _ = project_batch(params, np.asarray(q, dtype=np.float64)[None], max_steps, damping)
    return X[0], bool(conv[0])


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIid")


def serialize(params: NetworkParameters) -> bytes:
    """Versioned little-endian checkpoint; weights stored as float32."""
    arch = params.arch
    skip = -1 if arch.skip_layer is None else arch.skip_layer
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, arch.hidden_layers, arch.hidden_width, skip, arch.beta)
    return head + params.flat.astype("<f4").tobytes()


def deserialize(data: bytes) -> NetworkParameters:
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint("truncated header")
    magic, version, layers, width, skip, beta = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported format version {version}")
    arch = NetworkArchitecture(layers, width, None if skip < 0 else skip, beta)
    try:
        arch.validate()
    except InvalidArchitecture as exc:
        raise CorruptCheckpoint(str(exc)) from None
    body = data[_HEADER.size:]
    if len(body) != 4 * arch.param_count:
        raise CorruptCheckpoint(
            f"expected {4 * arch.param_count} weight bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.isfinite(flat).all():
        raise CorruptCheckpoint("non-finite weight")
    return NetworkParameters(arch, flat, seed=-1)


def model_byte_size(params: NetworkParameters) -> int:
    return len(serialize(params))


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_checkpoint(path) -> NetworkParameters:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
