"""Entropy-regularized optimal transport on a shared finite support.

Everything here works in the log domain. Potentials are stored in cost units
(``lam``, ``mu``); the balancing iterations divide by ``gamma`` internally, so
the unit-entropy formulas are recovered at ``gamma = 1``.

Conventions
-----------
Balancing uses the offset form of the dual,

    x_ij = exp((-c_ij + lam_i + mu_j) / gamma - 1),

so that a converged pair has total mass one without renormalisation. The
plan returned by :func:`plan_from_duals` is always renormalised to total mass
one, which makes the offset (and any additive shift of either potential)
irrelevant for the plan itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.special import xlogy

from .exceptions import ToleranceNotReached

__all__ = [
    "MIN_WEIGHT",
    "DualPotentials",
    "TransportPlan",
    "SolveReport",
    "StoppingRule",
    "as_probability",
    "as_cost",
    "smooth_marginal",
    "squared_distances",
    "check_marginals",
    "plan_from_duals",
    "balancing_step",
    "solve_entropic_ot",
    "entropic_value",
    "dual_value",
    "grad_H",
    "dual_H_star",
    "grad_H_star",
    "hilbert_metric",
    "marginal_residual",
]

MIN_WEIGHT = 1e-300
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000


def logsumexp(a: np.ndarray, axis=None, keepdims: bool = False):
    """Max-shifted log-sum-exp (scipy's version carries heavy per-call overhead)."""
    amax = np.max(a, axis=axis, keepdims=True)
    if not np.all(np.isfinite(amax)):
        amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# validation helpers


def as_probability(weights, name: str = "weights") -> np.ndarray:
    """Validate a weight vector and renormalise it onto the simplex.

    Entries below ``MIN_WEIGHT`` are rejected rather than silently clamped;
    use :func:`smooth_marginal` first if the data has empty bins.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite entries")
    bad = np.flatnonzero(w < MIN_WEIGHT)
    if bad.size:
        raise ValueError(
            f"{name} must be strictly positive; entry {bad[0]} is {w[bad[0]]!r} "
            "(use smooth_marginal to clamp empty bins)"
        )
    return w / w.sum()


def smooth_marginal(weights, eps: float = 1e-9) -> np.ndarray:
    """Mix ``eps`` mass into every bin so zero entries become admissible."""
    w = np.asarray(weights, dtype=float)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    w = w / w.sum()
    return (w + eps) / (1.0 + eps * w.size)


def as_cost(cost, n: int | None = None) -> np.ndarray:
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost must be a square matrix, got shape {c.shape}")
    if n is not None and c.shape[0] != n:
        raise ValueError(f"cost is {c.shape[0]}x{c.shape[0]} but marginals have length {n}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost contains non-finite entries")
    neg = np.argwhere(c < 0)
    if neg.size:
        i, j = neg[0]
        raise ValueError(f"cost must be nonnegative; c[{i},{j}] = {float(c[i, j])!r}")
    return c


def squared_distances(points) -> np.ndarray:
    """Pairwise squared Euclidean distances of an ``(n, d)`` point cloud."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    diff = p[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def check_marginals(L, W, atol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Reject marginals with different total mass, then renormalise both.

    Balance constraints with unequal totals have no feasible plan.
    """
    L_raw = np.asarray(L, dtype=float)
    W_raw = np.asarray(W, dtype=float)
    if L_raw.shape != W_raw.shape:
        raise ValueError(f"marginals differ in length: {L_raw.shape} vs {W_raw.shape}")
    gap = abs(L_raw.sum() - W_raw.sum())
    if gap > atol:
        raise ValueError(
            f"marginal totals differ by {gap:.3e}; the balance constraints are infeasible"
        )
    return as_probability(L_raw, "L"), as_probability(W_raw, "W")


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class DualPotentials:
    """Row/column potentials ``(lam, mu)``, defined up to additive shifts."""

    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self) -> None:
        lam = np.asarray(self.lam, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if lam.shape != mu.shape or lam.ndim != 1:
            raise ValueError("lam and mu must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
            raise ValueError("dual potentials must be finite")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def zeros(cls, n: int) -> "DualPotentials":
        return cls(np.zeros(n), np.zeros(n))

    def canonical(self) -> "DualPotentials":
        """Minimum-norm representative: both potentials shifted to zero mean."""
        return DualPotentials(self.lam - self.lam.mean(), self.mu - self.mu.mean())

    def norm(self) -> float:
        c = self.canonical()
        return float(np.sqrt(c.lam @ c.lam + c.mu @ c.mu))


@dataclass(frozen=True)
class TransportPlan:
    entries: np.ndarray
    gamma: float

    @property
    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)


@dataclass(frozen=True)
class StoppingRule:
    """When to stop balancing.

    ``kind`` selects the test applied after each full iteration:

    * ``"residual"``: ``||Ax - b||_2 <= tol``
    * ``"relative_residual"``: ``||Ax - b||_2 <= tol * ||b||_2``
    * ``"certificate"``: the inexact-oracle criterion with ``delta = tol``
    * ``"max_iter"``: run exactly ``max_iter`` iterations
    """

    kind: Literal["residual", "relative_residual", "certificate", "max_iter"] = "residual"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self) -> None:
        if self.kind not in ("residual", "relative_residual", "certificate", "max_iter"):
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if self.kind != "max_iter" and not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass(frozen=True)
class SolveReport:
    plan: TransportPlan
    duals: DualPotentials
    value: float
    iterations: int
    marginal_residual: float
    converged: bool
    dual_objective: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# plan and residuals


def _log_plan(lam: np.ndarray, mu: np.ndarray, cost: np.ndarray, gamma: float) -> np.ndarray:
    logx = (lam[:, None] + mu[None, :] - cost) / gamma
    return logx - logsumexp(logx)


def plan_from_duals(duals: DualPotentials, cost, gamma: float = 1.0) -> TransportPlan:
    """Gibbs plan ``exp((-c + lam_i + mu_j)/gamma)`` normalised to total mass one."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    c = np.asarray(cost, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        logx = _log_plan(duals.lam, duals.mu, c, gamma)
        x = np.exp(logx)
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        i, j = bad[0]
        raise OverflowError(f"non-finite plan entry at ({i}, {j}) after log-domain stabilisation")
    return TransportPlan(x, float(gamma))


def marginal_residual(plan: TransportPlan | np.ndarray, L, W):
    """Row defect, column defect and the 2-norm of their concatenation."""
    x = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    L = np.asarray(L, dtype=float)
    W = np.asarray(W, dtype=float)
    if x.shape != (L.size, W.size):
        raise ValueError(f"plan shape {x.shape} does not match marginals ({L.size}, {W.size})")
    row = x.sum(axis=1) - L
    col = x.sum(axis=0) - W
    return row, col, float(np.sqrt(row @ row + col @ col))


def entropic_value(plan: TransportPlan, cost) -> float:
    """``gamma * sum x ln x + sum c x`` on the given plan."""
    x = plan.entries
    return float(plan.gamma * xlogy(x, x).sum() + (np.asarray(cost) * x).sum())


def dual_value(duals: DualPotentials, cost, L, W, gamma: float = 1.0) -> float:
    """Offset-form dual objective; a lower bound on the transport value."""
    logx = (duals.lam[:, None] + duals.mu[None, :] - np.asarray(cost)) / gamma - 1.0
    return float(duals.lam @ L + duals.mu @ W - gamma * np.exp(logsumexp(logx)))


# ---------------------------------------------------------------------------
# balancing


def _lam_update(g: np.ndarray, C: np.ndarray, logL: np.ndarray) -> np.ndarray:
    # scaled potentials (divided by gamma); "-1" offset convention
    return logL + 1.0 - logsumexp(g[None, :] - C, axis=1)


def _mu_update(f: np.ndarray, C: np.ndarray, logW: np.ndarray) -> np.ndarray:
    return logW + 1.0 - logsumexp(f[:, None] - C, axis=0)


def balancing_step(
    duals: DualPotentials,
    cost,
    L,
    W,
    gamma: float = 1.0,
    *,
    order: Literal["gauss-seidel", "jacobi"] = "gauss-seidel",
) -> DualPotentials:
    """One balancing (Sinkhorn) sweep in the log domain.

    The row update makes the row marginals equal ``L``; with the default
    Gauss-Seidel order the column update then uses the fresh row potential and
    makes the column marginals equal ``W``. ``order="jacobi"`` updates both
    from the previous pair.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    C = np.asarray(cost, dtype=float) / gamma
    logL = np.log(np.asarray(L, dtype=float))
    logW = np.log(np.asarray(W, dtype=float))
    f = duals.lam / gamma
    g = duals.mu / gamma
    f_new = _lam_update(g, C, logL)
    if order == "gauss-seidel":
        g_new = _mu_update(f_new, C, logW)
    elif order == "jacobi":
        g_new = _mu_update(f, C, logW)
    else:
        raise ValueError(f"unknown update order {order!r}")
    return DualPotentials(gamma * f_new, gamma * g_new)


def solve_entropic_ot(
    cost,
    L,
    W,
    gamma: float = 1.0,
    stop: StoppingRule | None = None,
    *,
    init: DualPotentials | None = None,
    order: Literal["gauss-seidel", "jacobi"] = "gauss-seidel",
    callback: Callable[[int, float], None] | None = None,
    keep_history: bool = False,
) -> SolveReport:
    """Solve the entropy-regularised transport problem by balancing.

    Parameters
    ----------
    cost : (n, n) array
        Nonnegative cost matrix.
    L, W : (n,) arrays
        Row and column marginals. Totals must agree to 1e-9; both are then
        renormalised to one.
    gamma : float
        Entropy weight.
    stop : StoppingRule
        Defaults to an absolute residual of 1e-8 within 1e5 iterations.
    init : DualPotentials, optional
        Warm start.
    callback : callable, optional
        Called as ``callback(iteration, residual)`` after every sweep.

    Returns
    -------
    SolveReport
        ``converged`` is False when the iteration budget ran out first; this
        is reported, not raised.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    stop = stop or StoppingRule()
    L, W = check_marginals(L, W)
    n = L.size
    c = as_cost(cost, n)
    C = c / gamma
    logL, logW = np.log(L), np.log(W)

    if init is None:
        f = np.zeros(n)
        g = np.zeros(n)
    else:
        if init.lam.size != n:
            raise ValueError("warm-start potentials have the wrong length")
        f = init.lam / gamma
        g = init.mu / gamma

    b_norm = float(np.sqrt(L @ L + W @ W))
    certificate = None
    if stop.kind == "certificate":
        from .oracle import certificate_holds as certificate

    def residual_of(f, g):
        logx = f[:, None] + g[None, :] - C
        logx -= logsumexp(logx)
        x = np.exp(logx)
        row = x.sum(axis=1) - L
        col = x.sum(axis=0) - W
        return float(np.sqrt(row @ row + col @ col))

    def satisfied(res: float) -> bool:
        if stop.kind == "residual":
            return res <= stop.tol
        if stop.kind == "relative_residual":
            return res <= stop.tol * b_norm
        if stop.kind == "certificate":
            duals = DualPotentials(gamma * f, gamma * g)
            return certificate(res, duals.norm(), stop.tol)
        return False

    history: list[float] = []
    res = residual_of(f, g)
    if keep_history:
        history.append(res)
    it = 0
    converged = stop.kind != "max_iter" and satisfied(res)
    while not converged and it < stop.max_iter:
        if order == "gauss-seidel":
            f = _lam_update(g, C, logL)
            g = _mu_update(f, C, logW)
        elif order == "jacobi":
            f, g = _lam_update(g, C, logL), _mu_update(f, C, logW)
        else:
            raise ValueError(f"unknown update order {order!r}")
        it += 1
        res = residual_of(f, g)
        if keep_history:
            history.append(res)
        if callback is not None:
            callback(it, res)
        converged = satisfied(res)
    if stop.kind == "max_iter":
        converged = True

    duals = DualPotentials(gamma * f, gamma * g)
    plan = plan_from_duals(duals, c, gamma)
    _, _, res = marginal_residual(plan, L, W)
    return SolveReport(
        plan=plan,
        duals=duals,
        value=entropic_value(plan, c),
        iterations=it,
        marginal_residual=res,
        converged=converged,
        dual_objective=dual_value(duals, c, L, W, gamma),
        history=history,
    )


# ---------------------------------------------------------------------------
# distance as a function of one marginal, and its conjugate


def grad_H(L, W, cost, gamma: float = 1.0, tol: float = 1e-10, *, max_iter: int = DEFAULT_MAX_ITER,
           init: DualPotentials | None = None) -> np.ndarray:
    """Gradient of ``L -> Delta(L, W)``: the zero-mean row potential.

    Raises
    ------
    ToleranceNotReached
        If balancing does not reach ``tol`` within ``max_iter`` sweeps.
    """
    rep = solve_entropic_ot(cost, L, W, gamma, StoppingRule("residual", tol, max_iter), init=init)
    if not rep.converged:
        raise ToleranceNotReached(
            f"balancing stopped at residual {rep.marginal_residual:.3e} > {tol:.1e}",
            residual=rep.marginal_residual,
            iterations=rep.iterations,
        )
    lam = rep.duals.lam
    return lam - lam.mean()


def _column_logits(lam, cost, gamma):
    return (np.asarray(lam, dtype=float)[:, None] - np.asarray(cost, dtype=float)) / gamma


def dual_H_star(lam, W, cost, gamma: float = 1.0) -> float:
    """Closed-form conjugate ``gamma * sum_j W_j ln((1/W_j) sum_i exp((-c_ij + lam_i)/gamma))``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    W = np.asarray(W, dtype=float)
    lse = logsumexp(_column_logits(lam, cost, gamma), axis=0)
    return float(gamma * (W @ (lse - np.log(W))))


def grad_H_star(lam, W, cost, gamma: float = 1.0) -> np.ndarray:
    """``W``-weighted average of the column softmaxes of ``(lam - c)/gamma``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    logits = _column_logits(lam, cost, gamma)
    soft = np.exp(logits - logsumexp(logits, axis=0, keepdims=True))
    out = soft @ np.asarray(W, dtype=float)
    return out / out.sum()


# ---------------------------------------------------------------------------
# diagnostics


def hilbert_metric(u, v) -> float:
    """Birkhoff-Hilbert projective distance ``ln(max(u/v) * max(v/u))``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("vectors must have the same shape")
    if np.any(u <= 0) or np.any(v <= 0):
        raise ValueError("Hilbert metric needs strictly positive vectors")
    r = np.log(u) - np.log(v)
    return float(r.max() - r.min())
