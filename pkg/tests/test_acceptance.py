"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line with its measured numbers; the lines are
printed together at the end of the pytest run (see ``conftest.py``).
"""

import time

import numpy as np
import pytest

from etk.barycenter import BarycenterProblem, barycenter_dual, barycenter_primal, dual_objective, warm_start_shift
from etk.barycenter import DualState
from etk.cli import bench_instance
from etk.core_ot import (
    StoppingRule,
    dual_H_star,
    grad_H,
    grad_H_star,
    solve_entropic_ot,
    squared_distances,
)
from etk.equilibrium import FeasibleSet, f_oracle, f_value, solve_equilibrium, toy_cost_model
from etk.oracle import check_oracle_inequality, exact_oracle
from etk.universal_gd import ProxSetup, universal_method

RESULTS: list[str] = []


def record(num: int, passed: bool, title: str, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if passed else 'FAIL'}] criterion {num}: {title} ({detail})")


def rel_err(a, b) -> float:
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def r_squared(x, y) -> float:
    slope, icpt = np.polyfit(x, y, 1)
    pred = slope * x + icpt
    return float(1 - np.sum((y - pred) ** 2) / np.sum((y - np.mean(y)) ** 2))


# ---------------------------------------------------------------------------


def test_balancing_speed():
    c, L, W = bench_instance(100, 7)
    t0 = time.perf_counter()
    rep = solve_entropic_ot(c, L, W, 1.0, StoppingRule("relative_residual", 0.01))
    wall = time.perf_counter() - t0
    rel = rep.marginal_residual / np.sqrt(L @ L + W @ W)
    passed = rep.converged and rel <= 0.01 and wall <= 10.0
    record(1, passed, "balancing speed, n=100", f"{wall:.4f} s, {rep.iterations} iterations, "
           f"relative residual {rel:.2e}")
    assert passed


def test_linear_convergence():
    worst = 1.0
    slopes = []
    for k in range(20):
        rng = np.random.default_rng([k, 99])
        # points spread over [0, 4]^2 keep the residual above round-off for 50 sweeps
        c = squared_distances(rng.uniform(0.0, 4.0, (20, 2)))
        L = rng.dirichlet(np.ones(20))
        W = rng.dirichlet(np.ones(20))
        rep = solve_entropic_ot(c, L, W, 1.0, StoppingRule("max_iter", max_iter=50), keep_history=True)
        res = np.array(rep.history[1:51])
        assert np.all(res > 1e-14), "residual reached round-off; fit would be meaningless"
        it = np.arange(1, 51)
        worst = min(worst, r_squared(it, np.log(res)))
        slopes.append(np.polyfit(it, np.log(res), 1)[0])
    passed = worst >= 0.95
    record(2, passed, "linear convergence of balancing, 20 instances n=20",
           f"min R^2 {worst:.4f}, mean log-slope {np.mean(slopes):.3f}")
    assert passed


def test_gradient_suite():
    rng = np.random.default_rng(33)
    errs = {}

    # gradient of L -> Delta(L, W) along simplex-tangent directions
    n = 8
    c = squared_distances(rng.uniform(0, 1, (n, 2)))
    L, W = rng.dirichlet(np.ones(n) * 2, size=2)
    g = grad_H(L, W, c, 1.0, tol=1e-13)
    h = 1e-5

    def H(x):
        return solve_entropic_ot(c, x, W, 1.0, StoppingRule("residual", 1e-14)).value

    fd, an = [], []
    for _ in range(5):
        d = rng.normal(size=n)
        d -= d.mean()
        fd.append((H(L + h * d) - H(L - h * d)) / (2 * h))
        an.append(g @ d)
    errs["grad_H"] = rel_err(an, fd)

    # closed-form conjugate gradient
    lam = rng.normal(size=n)
    h = 1e-6
    fd = [(dual_H_star(lam + h * e, W, c) - dual_H_star(lam - h * e, W, c)) / (2 * h) for e in np.eye(n)]
    errs["grad_H_star"] = rel_err(grad_H_star(lam, W, c), fd)

    # barycenter dual objective, m=3, n=5
    n = 5
    c5 = squared_distances(rng.uniform(0, 1, (n, 2)))
    prob = BarycenterProblem(tuple(rng.dirichlet(np.ones(n), size=3)), c5)
    x = rng.normal(size=2 * n)
    _, gx = dual_objective(x, prob)
    fd = [(dual_objective(x + h * e, prob)[0] - dual_objective(x - h * e, prob)[0]) / (2 * h)
          for e in np.eye(2 * n)]
    errs["barycenter_dual"] = rel_err(gx, fd)

    # equilibrium gradient, dim(y)=3, n=4
    n, d = 4, 3
    model = toy_cost_model(rng.uniform(0, 1, (n, n)), rng.uniform(0, 1, (n, n, d)), 0.7,
                           rng.uniform(0, 1, d))
    Lm, Wm = rng.dirichlet(np.ones(n), size=2)
    y = rng.uniform(0.2, 1.5, d)
    G = f_oracle(y, model, Lm, Wm, 1e-10).G
    h = 1e-5
    fd = [(f_value(y + h * e, model, Lm, Wm) - f_value(y - h * e, model, Lm, Wm)) / (2 * h) for e in np.eye(d)]
    errs["equilibrium"] = rel_err(G, fd)

    limits = {"grad_H": 1e-4, "grad_H_star": 1e-6, "barycenter_dual": 1e-6, "equilibrium": 1e-4}
    passed = all(errs[k] <= limits[k] for k in limits)
    record(3, passed, "gradients vs central differences",
           ", ".join(f"{k} {errs[k]:.1e} (limit {limits[k]:.0e})" for k in limits))
    assert passed


def test_barycenter_correctness():
    rng = np.random.default_rng(44)
    n = 6
    # all off-diagonal costs equal 20: the transport blur exp(-20) is far below
    # the tolerances, so the single-measure minimiser coincides with W
    sep = 20.0 * (1.0 - np.eye(n))
    W = rng.dirichlet(np.ones(n) * 3)

    _, L1, _ = barycenter_dual(BarycenterProblem((W,), sep))
    err_single = float(np.max(np.abs(L1 - W)))

    init = DualState(tuple(rng.normal(scale=0.5, size=(2, n))))
    _, L3, h3 = barycenter_dual(BarycenterProblem((W, W, W), sep), 1e-9, init=init)
    err_same = float(np.max(np.abs(L3 - W)))

    ms = tuple(rng.dirichlet(np.ones(n), size=3))
    zero = BarycenterProblem(ms, np.zeros((n, n)))
    Lp0, _ = barycenter_primal(zero, 1e-7)
    _, Ld0, _ = barycenter_dual(zero, 1e-8)
    err_uniform = float(max(np.max(np.abs(Lp0 - 1 / n)), np.max(np.abs(Ld0 - 1 / n))))

    worst_rel = 0.0
    for nn, m in ((4, 2), (7, 3), (10, 5)):
        c = squared_distances(rng.uniform(0, 1, (nn, 2)))
        prob = BarycenterProblem(tuple(rng.dirichlet(np.ones(nn) * 2, size=m)), c)
        _, hp = barycenter_primal(prob, 1e-5)
        _, _, hd = barycenter_dual(prob, 1e-7)
        fp, fdual = hp.info["objective"], hd.info["objective"]
        worst_rel = max(worst_rel, abs(fp - fdual) / abs(fdual))

    passed = err_single <= 1e-6 and err_same <= 1e-5 and err_uniform <= 1e-5 and worst_rel <= 1e-3
    record(4, passed, "barycenter correctness",
           f"m=1 |L-W| {err_single:.1e}, identical m=3 |L-W| {err_same:.1e} in {h3.iterations} iterations, "
           f"c=0 |L-u| {err_uniform:.1e}, primal/dual rel gap {worst_rel:.1e}")
    assert passed


def test_oracle_inequality():
    rng = np.random.default_rng(55)
    n, d = 4, 2
    model = toy_cost_model(rng.uniform(0, 1, (n, n)), rng.uniform(0, 1, (n, n, d)), 1.0, [0.5, 0.5])
    L, W = rng.dirichlet(np.ones(n) * 2, size=2)
    delta = 1e-4

    def oracle(y, _delta=None):
        return f_oracle(y, model, L, W, delta)

    def reference(y):
        return f_value(y, model, L, W, tol=delta / 100)

    chk = check_oracle_inequality(oracle, reference, (np.zeros(d), 2 * np.ones(d)), 1000, rng=rng)
    r = oracle(np.ones(d))
    passed = chk.pass_fraction >= 0.99
    record(5, passed, "oracle two-sided bound, 1000 probe pairs",
           f"pass {chk.pass_fraction:.3f} (lower {chk.lower_pass:.3f}, upper {chk.upper_pass:.3f}), "
           f"constants ({r.delta:.0e}, {r.lipschitz:.2f}), worst violation {chk.worst_violation:.1e}")
    assert passed


def test_iteration_scaling():
    epsilons = np.array([1e-2, 1e-3, 1e-4])

    # logistic loss on non-separable data: a finite minimiser and no exponential tail
    slopes1, counts1 = [], []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(200, 5))
        b = np.sign(rng.normal(size=200))

        def f(x, A=A, b=b):
            return float(np.logaddexp(0, -b * (A @ x)).mean())

        def g(x, A=A, b=b):
            return A.T @ (-b / (1 + np.exp(b * (A @ x)))) / len(b)

        counts = []
        for eps in epsilons:
            _, hist = universal_method(exact_oracle(f, g), ProxSetup.free(5), np.zeros(5), eps, p=1, radius=10.0)
            assert hist.converged
            counts.append(hist.iterations)
        counts1.append(counts)
        slopes1.append(np.polyfit(np.log(epsilons), np.log(counts), 1)[0])

    kink = exact_oracle(lambda y: float(np.abs(y).sum()), np.sign)
    rough = []
    for eps in epsilons:
        _, hist = universal_method(kink, ProxSetup.free(1), np.array([0.03]), eps, p=0, max_iter=10**6)
        assert hist.converged
        rough.append(hist.iterations)

    s0 = np.polyfit(np.log(epsilons), np.log(rough), 1)[0]
    passed = all(abs(s + 0.5) <= 0.15 for s in slopes1) and abs(s0 + 2.0) <= 0.3
    record(6, passed, "iteration scaling in eps",
           f"p=1 logistic counts {counts1} slopes {np.round(slopes1, 3).tolist()}; p=0 |y| counts {rough} slope {s0:.3f}")
    assert passed


def _grid_values(model, L, W, grid, tol=1e-8):
    """Batched log-domain balancing over all grid nodes at once.

    Written separately from the package solver so the brute-force reference
    does not share code with the method under test.
    """
    Y = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    C = model.base[None] + np.einsum("ijk,pk->pij", model.sensitivities, Y)
    n = L.size
    f = np.zeros((len(Y), n))
    g = np.zeros((len(Y), n))
    logL, logW = np.log(L), np.log(W)
    for _ in range(100_000):
        a = g[:, None, :] - C
        f = logL - np.log(np.exp(a - a.max(axis=2, keepdims=True)).sum(axis=2)) - a.max(axis=2)
        a = f[:, :, None] - C
        g = logW - np.log(np.exp(a - a.max(axis=1, keepdims=True)).sum(axis=1)) - a.max(axis=1)
        logx = f[:, :, None] + g[:, None, :] - C
        x = np.exp(logx)
        res = np.sqrt(((x.sum(axis=2) - L) ** 2).sum(axis=1) + ((x.sum(axis=1) - W) ** 2).sum(axis=1))
        norm = np.sqrt(((f - f.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)
                       + ((g - g.mean(axis=1, keepdims=True)) ** 2).sum(axis=1))
        if np.all((res * norm <= tol / 2) & (res <= tol)):
            break
    logx = f[:, :, None] + g[:, None, :] - C
    m = logx.max(axis=(1, 2))
    lse = np.log(np.exp(logx - m[:, None, None]).sum(axis=(1, 2))) + m
    vals = lse - f @ L - g @ W + 0.5 * model.beta * ((Y - model.y_hat) ** 2).sum(axis=1)
    return Y, vals


def test_equilibrium_end_to_end():
    rng = np.random.default_rng(77)
    n = 3
    model = toy_cost_model(rng.uniform(0, 1, (n, n)), rng.uniform(0, 1, (n, n, 2)), 1.0, [0.8, -1.5])
    L = np.array([0.2, 0.3, 0.5])
    W = np.array([0.45, 0.35, 0.2])
    Q = FeasibleSet([0.0, 0.0])
    rep = solve_equilibrium(model, L, W, Q, 1e-5)
    grid = np.linspace(0.0, 3.0, 200)
    Y, vals = _grid_values(model, L, W, grid)
    k = int(np.argmin(vals))
    gap = abs(rep.f - vals[k])
    inside = np.all(rep.y <= grid[-1])

    worst_proj = 0.0
    for y_hat in ([0.7, 1.2], [1.5, -0.4], [-2.0, -1.0]):
        const = toy_cost_model(rng.uniform(0, 1, (n, n)), np.zeros((n, n, 2)), 2.0, y_hat)
        r = solve_equilibrium(const, L, W, Q, 1e-8)
        worst_proj = max(worst_proj, float(np.max(np.abs(r.y - Q.project(y_hat)))))

    passed = rep.converged and inside and gap <= 1e-3 and worst_proj <= 1e-5
    record(7, passed, "equilibrium vs 200x200 grid",
           f"solver y={np.round(rep.y, 4).tolist()} f={rep.f:.6f}; grid y={np.round(Y[k], 4).tolist()} "
           f"f={vals[k]:.6f}; gap {gap:.1e}; constant-cost projection error {worst_proj:.1e}")
    assert passed


def test_warm_start():
    n, m, eps = 8, 4, 1e-6
    wins = 0
    trials = 50
    ratios = []
    for k in range(trials):
        rng = np.random.default_rng([k, 88])
        c = squared_distances(rng.uniform(0, 1, (n, 2)))
        ms = [rng.dirichlet(np.ones(n) * 3) for _ in range(m)]
        state, _, _ = barycenter_dual(BarycenterProblem(tuple(ms), c), eps)
        # the window slides by one; the newcomer is a slight perturbation of the latest measure
        new = ms[-1] * np.exp(0.05 * rng.normal(size=n))
        nxt = BarycenterProblem(tuple(ms[1:] + [new / new.sum()]), c)
        _, _, cold = barycenter_dual(nxt, eps)
        _, _, warm = barycenter_dual(nxt, eps, init=warm_start_shift(state, 1))
        wins += warm.iterations <= cold.iterations
        ratios.append(warm.iterations / cold.iterations)
    frac = wins / trials
    passed = frac >= 0.8
    record(8, passed, "sliding-window warm start, 50 paired trials",
           f"warm <= cold in {frac:.0%}, median iteration ratio {np.median(ratios):.2f}")
    assert passed


@pytest.fixture(autouse=True, scope="module")
def _results_header():
    RESULTS.clear()
    yield
