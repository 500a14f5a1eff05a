"""Latitude-weighted and variable-adaptive losses, their sinusoidal blend,
closed-form gradients, and a simulator for the (theta, w) dynamics.

Fields are [..., V, H, W]: latitude runs along axis -2, variables along
axis -3. Every mean is over all elements, with ``w`` broadcast per variable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from emkit.errors import ConfigError, DegenerateGridError, ShapeError
from emkit.tensor.core import Tensor
from emkit.tensor.tape import current_tape


def lat_centers(n_lat: int) -> np.ndarray:
    """Cell-centre latitudes (degrees) of an equiangular grid, north to south."""
    step = 180.0 / n_lat
    return 90.0 - step * (np.arange(n_lat) + 0.5)


def latitude_weights(lats) -> np.ndarray:
    """L_i = N_lat cos(phi_i) / sum_j cos(phi_j); the weights average to 1."""
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    if lats.size == 0:
        raise DegenerateGridError("no latitude rows")
    c = np.cos(np.deg2rad(lats))
    c[np.abs(lats) == 90.0] = 0.0  # cos(pi/2) is 6e-17 in floating point
    c = np.maximum(c, 0.0)
    total = c.sum()
    if total <= 0.0:
        raise DegenerateGridError("all latitude rows sit on the poles")
    return lats.size * c / total


def _check(pred, truth, weights=None, w=None):
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} and truth {t.shape} differ")
    if p.ndim < 3:
        raise ShapeError(f"fields must be [..., V, H, W], got {p.shape}")
    if weights is not None and len(weights) != p.shape[-2]:
        raise ShapeError(f"{len(weights)} latitude weights for {p.shape[-2]} rows")
    if w is not None and np.shape(w) != (p.shape[-3],):
        raise ShapeError(f"w has shape {np.shape(w)}, expected ({p.shape[-3]},)")
    return p, t


def _wcol(w):
    return np.asarray(w, dtype=np.float64)[:, None, None]


def loss_lat(pred, truth, weights) -> float:
    p, t = _check(pred, truth, weights)
    e2 = (p - t) ** 2
    return float((np.asarray(weights)[:, None] * e2).mean())


def loss_var(pred, truth, w) -> float:
    p, t = _check(pred, truth, w=w)
    e2 = (p - t) ** 2
    wc = _wcol(w)
    return float((e2 * np.exp(-wc) + wc).mean())


def blend(theta: float, swapped: bool = False):
    """Coefficients (alpha, beta) on (loss_lat, loss_var)."""
    s = math.sin(theta)
    a, b = 0.5 * (1.0 - s), 0.5 * (1.0 + s)
    return (b, a) if swapped else (a, b)


def loss_total_value(pred, truth, w, theta: float, weights, swapped: bool = False) -> float:
    a, b = blend(theta, swapped)
    return a * loss_lat(pred, truth, weights) + b * loss_var(pred, truth, w)


@dataclass
class LossGrads:
    theta: float
    w: np.ndarray
    pred: np.ndarray
    A: float
    B: float
    value: float


def loss_grads(pred, truth, w, theta: float, weights, swapped: bool = False) -> LossGrads:
    p, t = _check(pred, truth, weights, w)
    e = p - t
    e2 = e * e
    n = e.size
    V = p.shape[-3]
    Lcol = np.asarray(weights, dtype=np.float64)[:, None]
    wc = _wcol(w)
    inv = np.exp(-wc)
    A = float((Lcol * e2).mean())
    B = float((e2 * inv + wc).mean())
    alpha, beta = blend(theta, swapped)
    c = 0.5 * math.cos(theta)
    d_theta = c * (A - B) if swapped else c * (B - A)
    per_var = np.moveaxis(e2, -3, 0).reshape(V, -1).mean(axis=1)
    d_w = beta * (1.0 / V) * (1.0 - per_var * np.exp(-np.asarray(w, dtype=np.float64)))
    d_pred = (2.0 / n) * e * (alpha * Lcol + beta * inv)
    return LossGrads(d_theta, d_w, d_pred, A, B, alpha * A + beta * B)


def loss_total(pred: Tensor, truth: Tensor, w: Tensor, theta: Tensor, weights,
               swapped: bool = False) -> Tensor:
    """Taped blended loss; the backward is the closed form of :func:`loss_grads`."""
    th = float(np.asarray(theta.data).reshape(-1)[0])
    g = loss_grads(pred, truth, w.data, th, weights, swapped)
    out = Tensor._wrap(np.asarray(g.value, dtype=pred.dtype))
    tape = current_tape()
    if tape is not None and any(tape.tracks(x) for x in (pred, w, theta)):
        def backward(up):
            s = float(up)
            return (
                (s * g.pred).astype(pred.dtype),
                None,
                (s * g.w).astype(w.dtype),
                np.full(theta.shape, s * g.theta, dtype=theta.dtype),
            )
        tape.record("loss_total", (pred, truth, w, theta), out, backward)
    return out


def loss_l2(pred: Tensor, truth: Tensor) -> Tensor:
    from emkit.tensor import ops
    d = ops.sub(pred, truth)
    return ops.mean(ops.mul(d, d))


def loss_additive(pred: Tensor, truth: Tensor, w: Tensor, weights) -> Tensor:
    """Unblended baseline A + B."""
    from emkit.tensor import ops
    # theta = 0 gives (A + B) / 2
    zero = Tensor(np.zeros(1), dtype=pred.dtype)
    return ops.scale(loss_total(pred, truth, w, zero, weights), 2.0)


@dataclass
class LossState:
    theta: float = -math.pi / 2 + 1e-3
    w: np.ndarray = field(default_factory=lambda: np.zeros(1))
    eta: float = 0.05

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        self.w = np.asarray(self.w, dtype=np.float64)
        self.clamp()

    def clamp(self):
        self.theta = float(min(max(self.theta, -math.pi / 2), math.pi / 2))


# dynamics simulator

@dataclass
class Trajectory:
    theta: np.ndarray
    w: np.ndarray        # [steps + 1, V]
    alpha: np.ndarray
    beta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    converged_step: int | None
    monotone_after_converged: bool
    diverged: bool = False

    def rows(self):
        for k in range(len(self.theta)):
            yield {"step": k, "theta": self.theta[k], "alpha": self.alpha[k], "beta": self.beta[k],
                   "A": self.A[k], "B": self.B[k], "w_mean": float(self.w[k].mean())}


def parse_schedule(text: str):
    """``const:E`` or ``geometric:E0,r`` (E_k = E0 * r^k)."""
    kind, _, arg = text.partition(":")
    try:
        if kind == "const":
            E = float(arg)
            return lambda k: E
        if kind == "geometric":
            e0, r = (float(v) for v in arg.split(","))
            return lambda k: e0 * r ** k
    except ValueError:
        pass
    raise ConfigError(f"bad error schedule {text!r}; use const:E or geometric:E0,r")


def dynamics_sim(error_schedule, eta: float = 0.05, steps: int = 10_000,
                 theta0: float = -math.pi / 2 + 1e-3, w0=0.0, n_vars: int = 1,
                 mode: str = "adiabatic", tol: float = 1e-3) -> Trajectory:
    """Gradient descent on (theta, w) for a synthetic uniform squared error.

    ``error_schedule(k)`` returns E, or a pair (E, A) when the latitude term
    should differ from the uniform error. With uniform error E the loss
    terms are A = E and B = mean_v(E e^{-w_v} + w_v).

    mode "coupled" takes the literal joint gradient step on w (scaled by
    beta / V, which nearly vanishes at theta0). mode "adiabatic" steps w on
    dB/dw_v = 1 - E e^{-w_v} with the same eta, the fast-w time-scale the
    monotonicity argument relies on.
    """
    if mode not in ("adiabatic", "coupled"):
        raise ConfigError(f"mode must be adiabatic or coupled, got {mode!r}")
    theta = float(theta0)
    w = np.full(n_vars, float(w0)) if np.ndim(w0) == 0 else np.asarray(w0, dtype=np.float64).copy()
    V = w.size
    th, ws, al, be, As, Bs = [], [], [], [], [], []
    diverged = False

    def terms(k):
        out = error_schedule(k)
        E, A = (out, out) if np.ndim(out) == 0 else out
        return float(E), float(A)

    for k in range(steps + 1):
        E, A = terms(k)
        B = float(np.mean(E * np.exp(-w) + w))
        alpha, beta = blend(theta)
        th.append(theta)
        ws.append(w.copy())
        al.append(alpha)
        be.append(beta)
        As.append(A)
        Bs.append(B)
        if not (np.isfinite(B) and np.isfinite(theta)):
            diverged = True
            break
        if k == steps:
            break
        dB_dw = 1.0 - E * np.exp(-w)
        d_theta = 0.5 * math.cos(theta) * (B - A)
        if mode == "coupled":
            w = w - eta * beta * dB_dw / V
        else:
            w = w - eta * dB_dw
        theta = min(max(theta - eta * d_theta, -math.pi / 2), math.pi / 2)

    theta_arr = np.array(th)
    w_arr = np.array(ws)
    E_seq = np.array([terms(k)[0] for k in range(len(theta_arr))])
    gap = np.max(np.abs(w_arr - np.log(np.maximum(E_seq, 1e-300))[:, None]), axis=1)
    hit = np.nonzero(gap < tol)[0]
    conv = int(hit[0]) if hit.size else None
    mono = bool(conv is not None and np.all(np.diff(theta_arr[conv:]) >= 0.0))
    return Trajectory(theta_arr, w_arr, np.array(al), np.array(be), np.array(As), np.array(Bs),
                      conv, mono, diverged)
