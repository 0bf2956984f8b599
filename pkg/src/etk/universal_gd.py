"""Universal gradient methods driven by inexact oracles.

Two members of the family are exposed: ``p=0`` is the primal universal
gradient method, ``p=1`` the fast (accelerated) universal method in
similar-triangles form. Neither needs a Lipschitz or Hölder constant: a
doubling/halving line search on the local curvature ``M`` with an
``eps``-dependent slack adapts to whatever smoothness the objective has.

Termination uses a model-gap certificate. The oracle replies define linear
lower models ``F_i + <G_i, x - y_i>``; their weighted average ``ell`` is a
global under-estimator of ``f``. The certificate is

    best F  -  min { ell(x) : x feasible, ||x - x0|| <= D },

where ``D`` is ``radius`` if given, else twice the farthest accepted point
from the start seen so far (the simplex is compact and needs no ball).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .core_ot import logsumexp
from .exceptions import DivergenceError
from .oracle import InexactOracleReply, delta_schedule

__all__ = ["ProxSetup", "IterationRecord", "RunHistory", "prox_step", "universal_method"]

MAX_DOUBLINGS = 60
# floor for simplex log-weights; keeps iterates strictly positive after underflow
LOG_WEIGHT_FLOOR = -680.0


@dataclass(frozen=True)
class ProxSetup:
    kind: Literal["euclidean_free", "euclidean_box", "entropic_simplex"]
    dim: int
    lower: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("euclidean_free", "euclidean_box", "entropic_simplex"):
            raise ValueError(f"unknown prox kind {self.kind!r}")
        if self.kind == "euclidean_box":
            if self.lower is None:
                raise ValueError("euclidean_box needs lower bounds")
            lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
            object.__setattr__(self, "lower", lower)

    @classmethod
    def free(cls, dim: int) -> "ProxSetup":
        return cls("euclidean_free", dim)

    @classmethod
    def box(cls, lower) -> "ProxSetup":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        return cls("euclidean_box", lower.size, lower)

    @classmethod
    def simplex(cls, dim: int) -> "ProxSetup":
        return cls("entropic_simplex", dim)

    def sq_norm(self, h: np.ndarray) -> float:
        # KL is 1-strongly convex w.r.t. the l1 norm on the simplex
        if self.kind == "entropic_simplex":
            return float(np.abs(h).sum() ** 2)
        return float(h @ h)

    def check_feasible(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"start point has shape {y.shape}, expected ({self.dim},)")
        if self.kind == "euclidean_box" and np.any(y < self.lower):
            raise ValueError("start point violates the lower bounds")
        if self.kind == "entropic_simplex":
            if np.any(y <= 0) or abs(y.sum() - 1.0) > 1e-12:
                raise ValueError("start point must lie in the open simplex")
        return y.copy()


def prox_step(prox: ProxSetup, y, g, step: float) -> np.ndarray:
    """Mirror step ``argmin_x step*<g, x> + V(x, y)`` for the given geometry."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    if prox.kind == "euclidean_free":
        return y - step * g
    if prox.kind == "euclidean_box":
        return np.maximum(prox.lower, y - step * g)
    logits = np.log(y) - step * (g - g.min())
    logits = np.maximum(logits - logsumexp(logits), LOG_WEIGHT_FLOOR)
    y_new = np.exp(logits)
    return y_new / y_new.sum()


@dataclass
class IterationRecord:
    k: int
    F: float
    best_F: float
    M: float
    delta: float
    gap: float
    radius: float
    oracle_calls: int
    info: dict = field(default_factory=dict, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RunHistory:
    records: list[IterationRecord] = field(default_factory=list)
    y_out: np.ndarray | None = None
    y_last: np.ndarray | None = None
    iterations: int = 0
    oracle_calls: int = 0
    converged: bool = False
    certificate: float = math.inf
    weight_sum: float = 0.0
    avg_grad: np.ndarray | None = None
    avg_point: np.ndarray | None = None
    avg_extras: dict = field(default_factory=dict, repr=False)
    info: dict = field(default_factory=dict, repr=False)

    @property
    def best_F(self) -> np.ndarray:
        return np.array([r.best_F for r in self.records])

    @property
    def curvature(self) -> np.ndarray:
        return np.array([r.M for r in self.records])


class _LowerModel:
    """Running weighted sum of the oracle's linear minorants."""

    def __init__(self, prox: ProxSetup, x0: np.ndarray) -> None:
        self.prox = prox
        self.x0 = x0
        self.A = 0.0
        self.const = 0.0
        self.gsum = np.zeros_like(x0)
        self.psum = np.zeros_like(x0)
        self.extras: dict[str, np.ndarray] = {}

    def add(self, a: float, y: np.ndarray, r: InexactOracleReply) -> None:
        self.A += a
        self.const += a * (r.F - float(r.G @ y))
        self.gsum += a * r.G
        self.psum += a * y
        for key, val in r.info.get("average", {}).items():
            self.extras[key] = self.extras.get(key, 0.0) + a * np.asarray(val)

    def minimum(self, D: float) -> float:
        kind = self.prox.kind
        g, x0 = self.gsum, self.x0
        if kind == "entropic_simplex":
            return (self.const + float(g.min())) / self.A
        if kind == "euclidean_free":
            return (self.const + float(g @ x0) - D * float(np.linalg.norm(g))) / self.A
        return (self.const + float(g @ _box_ball_argmin(g, x0, self.prox.lower, D))) / self.A


def _box_ball_argmin(g, x0, lower, D):
    """argmin <g, x> over {x >= lower, ||x - x0|| <= D}; x0 must be feasible."""
    def point(t):
        return np.maximum(lower, x0 - t * g)

    if D <= 0 or not np.any(g):
        return x0
    if not np.any(g < 0):
        corner = np.where(g > 0, lower, x0)
        if np.linalg.norm(corner - x0) <= D:
            return corner
    hi = 1.0
    while np.linalg.norm(point(hi) - x0) < D:
        hi *= 2.0
    lo = 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(point(mid) - x0) < D:
            lo = mid
        else:
            hi = mid
    return point(lo)


def universal_method(
    oracle: Callable[..., InexactOracleReply],
    prox: ProxSetup,
    y0,
    eps: float,
    p: int = 1,
    max_iter: int = 10_000,
    *,
    radius: float | None = None,
    M0: float = 1.0,
    delta_factor: float = 0.1,
    callback: Callable[[IterationRecord], None] | None = None,
) -> tuple[np.ndarray, RunHistory]:
    """Minimise a convex function given only an inexact first-order oracle.

    Parameters
    ----------
    oracle : callable
        ``oracle(y, delta) -> InexactOracleReply``. ``delta`` is the inner
        accuracy requested by the schedule; exact oracles may ignore it.
    prox : ProxSetup
        Feasible set and Bregman geometry.
    y0 : array
        Feasible start.
    eps : float
        Target accuracy for the model-gap certificate.
    p : {0, 1}
        0 for the primal method, 1 for the fast method.
    max_iter : int
        Outer iteration budget.
    radius : float, optional
        Ball radius for the certificate on unbounded sets.

    Returns
    -------
    y_out, history
        ``y_out`` is the point with the best objective estimate.

    Raises
    ------
    DivergenceError
        If no finite curvature estimate is accepted after 60 doublings.
    """
    if p not in (0, 1):
        raise ValueError("p must be 0 or 1")
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = prox.check_feasible(y0)
    x0 = x.copy()
    v = x.copy()
    model = _LowerModel(prox, x0)
    hist = RunHistory()
    M = float(M0)
    A = 0.0
    far = 0.0
    calls = 0
    best_F = math.inf
    best_x = x.copy()

    def ask(point, delta):
        nonlocal calls, best_F, best_x
        calls += 1
        r = oracle(point, delta)
        if np.isfinite(r.F):
            if r.F < best_F:
                best_F = r.F
                best_x = point.copy()
        return r

    def restore(point):
        # convex combinations of feasible points can drift by an ulp
        if prox.kind == "entropic_simplex":
            return point / point.sum()
        if prox.kind == "euclidean_box":
            return np.maximum(prox.lower, point)
        return point

    r_cur = None
    for k in range(max_iter):
        delta_k = delta_schedule(eps, p, k, delta_factor)
        if p == 0 and r_cur is None:
            r_cur = ask(x, delta_k)
        for _ in range(MAX_DOUBLINGS):
            if p == 1:
                a = (1.0 + math.sqrt(1.0 + 4.0 * M * A)) / (2.0 * M)
                tau = a / (A + a)
                y = restore(tau * v + (1.0 - tau) * x)
                ry = ask(y, delta_k)
                v_new = prox_step(prox, v, ry.G, a)
                x_new = restore(tau * v_new + (1.0 - tau) * x)
                slack = 0.5 * eps * tau
            else:
                a = 1.0 / M
                y, ry = x, r_cur
                x_new = prox_step(prox, x, ry.G, a)
                slack = 0.5 * eps
            rx = ask(x_new, delta_k)
            step = x_new - y
            bound = ry.F + float(ry.G @ step) + 0.5 * M * prox.sq_norm(step) + slack
            if np.isfinite(rx.F) and np.isfinite(ry.F) and rx.F <= bound:
                break
            M *= 2.0
        else:
            raise DivergenceError(
                f"curvature line search failed after {MAX_DOUBLINGS} doublings",
                {"iteration": k, "M": M, "F_y": ry.F, "F_x": rx.F},
            )
        model.add(a, y, ry)
        far = max(far, float(np.linalg.norm(y - x0)), float(np.linalg.norm(x_new - x0)))
        if p == 1:
            A += a
            v = v_new
        x = x_new
        r_cur = rx
        D = radius if radius is not None else 2.0 * far
        gap = best_F - model.minimum(D)
        rec = IterationRecord(k + 1, rx.F, best_F, M, rx.delta, gap, D, calls,
                              {"residuals": rx.info.get("residuals", {})}, y.copy())
        hist.records.append(rec)
        if callback is not None:
            callback(rec)
        M *= 0.5
        if gap <= eps:
            hist.converged = True
            break

    hist.iterations = len(hist.records)
    hist.oracle_calls = calls
    hist.y_out = best_x
    hist.y_last = x
    hist.certificate = hist.records[-1].gap if hist.records else math.inf
    if model.A > 0:
        hist.weight_sum = model.A
        hist.avg_grad = model.gsum / model.A
        hist.avg_point = model.psum / model.A
        hist.avg_extras = {k: v / model.A for k, v in model.extras.items()}
    return best_x, hist
