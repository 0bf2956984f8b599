import numpy as np
import pytest

from etk.core_ot import DualPotentials, plan_from_duals
from etk.equilibrium import (
    COST_MODELS,
    CostModel,
    FeasibleSet,
    build_cost_model,
    danskin_gradient,
    f_oracle,
    f_value,
    register_cost_model,
    solve_equilibrium,
    toy_cost_model,
)


def toy(rng, n=3, d=2, beta=1.0, y_hat=None):
    base = rng.uniform(0.0, 1.0, (n, n))
    s = rng.uniform(0.0, 1.0, (n, n, d))
    return toy_cost_model(base, s, beta, np.zeros(d) if y_hat is None else y_hat)


MARG_L = np.array([0.2, 0.3, 0.5])
MARG_W = np.array([0.4, 0.4, 0.2])


class KinkedModel(CostModel):
    """Costs ``c0 + s_ij * min(y_1, y_2)``: concave but not differentiable on the diagonal."""

    smooth = False

    def __init__(self, base, s, beta=1.0):
        self.base = np.asarray(base, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.n = self.base.shape[0]
        self.dim = 2
        self.beta = beta

    def cost(self, y):
        return self.base + self.s * min(y[0], y[1])

    def cost_grad(self, y):
        e = np.array([1.0, 0.0]) if y[0] <= y[1] else np.array([0.0, 1.0])
        return self.s[:, :, None] * e

    def g(self, y):
        return -0.5 * self.beta * float(y @ y)

    def g_grad(self, y):
        return -self.beta * np.asarray(y, dtype=float)

    def subgradient_bound(self):
        return float(self.s.max() + 10 * self.beta)


# ---------------------------------------------------------------------------
# models


def test_toy_rejects_negative_sensitivity(rng):
    s = rng.uniform(0, 1, (3, 3, 2))
    s[1, 2, 0] = -0.01
    with pytest.raises(ValueError, match=r"\(1, 2, 0\)"):
        toy_cost_model(np.ones((3, 3)), s, 1.0, [0.0, 0.0])


def test_zero_sensitivities_reduce_to_constant(rng):
    base = rng.uniform(0, 1, (3, 3))
    m = toy_cost_model(base, np.zeros((3, 3, 2)), 2.0, [1.0, -1.0])
    for y in rng.normal(size=(5, 2)):
        assert np.array_equal(m.cost(y), base)


def test_cost_gradient_is_exact(rng):
    m = toy(rng)
    y = rng.uniform(0, 2, 2)
    h = 1e-3
    for k, e in enumerate(np.eye(2)):
        fd = (m.cost(y + h * e) - m.cost(y - h * e)) / (2 * h)
        assert np.allclose(fd, m.cost_grad(y)[:, :, k], rtol=1e-10, atol=1e-12)


def test_registry(rng):
    assert {"toy", "constant"} <= set(COST_MODELS)
    m = build_cost_model("constant", {"base": np.ones((2, 2)).tolist(), "y_hat": [1.0, 2.0]})
    assert m.dim == 2 and m.n == 2
    with pytest.raises(ValueError, match="unknown cost model"):
        build_cost_model("nope", {})
    with pytest.raises(ValueError, match="already registered"):
        register_cost_model("toy", lambda cfg: None)


def test_feasible_set():
    Q = FeasibleSet([0.5, -1.0])
    assert np.array_equal(Q.default_start(), [0.5, 0.0])
    assert np.array_equal(Q.project([0.0, -3.0]), [0.5, -1.0])
    with pytest.raises(ValueError):
        FeasibleSet([np.nan])


# ---------------------------------------------------------------------------
# oracle


def test_constant_costs_gradient_is_quadratic_term(rng):
    base = rng.uniform(0, 1, (3, 3))
    y_hat = np.array([0.4, 1.3])
    m = toy_cost_model(base, np.zeros((3, 3, 2)), 2.5, y_hat)
    y = np.array([1.0, 0.2])
    r = f_oracle(y, m, MARG_L, MARG_W, 1e-8)
    assert np.array_equal(r.G, 2.5 * (y - y_hat))


def test_danskin_gradient_finite_differences(rng):
    m = toy(rng, y_hat=np.array([0.3, 0.6]))
    y = np.array([0.7, 0.2])
    r = f_oracle(y, m, MARG_L, MARG_W, 1e-10)
    h = 1e-5
    fd = np.array([(f_value(y + h * e, m, MARG_L, MARG_W) - f_value(y - h * e, m, MARG_L, MARG_W)) / (2 * h)
                   for e in np.eye(2)])
    assert np.linalg.norm(fd - r.G) <= 1e-4 * np.linalg.norm(fd)


def test_gradient_independent_of_dual_shift(rng):
    m = toy(rng)
    y = np.array([0.5, 0.5])
    r = f_oracle(y, m, MARG_L, MARG_W, 1e-10)
    d = r.info["duals"]
    shifted = DualPotentials(d.lam + 3.7, d.mu - 12.0)
    c = m.cost(y)
    g1 = danskin_gradient(plan_from_duals(d, c), m, y)
    g2 = danskin_gradient(plan_from_duals(shifted, c), m, y)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-14)


def test_oracle_value_offset_and_constants(rng):
    m = toy(rng)
    y = np.array([0.3, 0.9])
    delta = 1e-6
    r = f_oracle(y, m, MARG_L, MARG_W, delta)
    exact = f_value(y, m, MARG_L, MARG_W)
    assert exact - r.F <= 2 * delta + 1e-12
    assert exact - r.F >= 2 * delta - delta
    assert r.delta == pytest.approx(6 * delta)
    assert r.lipschitz == pytest.approx(2 * m.joint_lipschitz())


def test_inner_iterations_grow_like_log_inverse_delta(rng):
    m = toy(rng, n=6, d=2)
    L = rng.dirichlet(np.ones(6))
    W = rng.dirichlet(np.ones(6))
    y = np.array([0.4, 0.8])
    deltas = np.logspace(-2, -10, 9)
    counts = [f_oracle(y, m, L, W, d).info["inner_iterations"] for d in deltas]
    x = np.log(1 / deltas)
    slope, icpt = np.polyfit(x, counts, 1)
    pred = slope * x + icpt
    r2 = 1 - np.sum((counts - pred) ** 2) / np.sum((counts - np.mean(counts)) ** 2)
    assert slope > 0
    assert r2 >= 0.9


def test_negative_costs_rejected():
    m = toy_cost_model(np.zeros((2, 2)), np.ones((2, 2, 1)), 1.0, [0.0])
    with pytest.raises(ValueError, match="negative"):
        f_oracle(np.array([-1.0]), m, [0.5, 0.5], [0.5, 0.5], 1e-6)


# ---------------------------------------------------------------------------
# outer solve


def test_constant_costs_interior_optimum(rng):
    y_hat = np.array([0.7, 1.4])
    m = toy_cost_model(rng.uniform(0, 1, (3, 3)), np.zeros((3, 3, 2)), 1.0, y_hat)
    rep = solve_equilibrium(m, MARG_L, MARG_W, FeasibleSet([0.0, 0.0]), 1e-8)
    assert rep.converged
    assert np.allclose(rep.y, y_hat, atol=1e-5)


def test_constant_costs_clamped(rng):
    y_hat = np.array([0.7, -0.5])
    m = toy_cost_model(rng.uniform(0, 1, (3, 3)), np.zeros((3, 3, 2)), 1.0, y_hat)
    rep = solve_equilibrium(m, MARG_L, MARG_W, FeasibleSet([0.0, 0.0]), 1e-8)
    assert rep.y[1] == 0.0
    assert rep.y[0] == pytest.approx(0.7, abs=1e-5)


def test_toy_convex_on_box_and_solver_converges(rng):
    m = toy(rng)
    for _ in range(30):
        a, b = rng.uniform(0, 3, (2, 2))
        mid = f_value(0.5 * (a + b), m, MARG_L, MARG_W)
        assert mid <= 0.5 * (f_value(a, m, MARG_L, MARG_W) + f_value(b, m, MARG_L, MARG_W)) + 1e-10
    rep = solve_equilibrium(m, MARG_L, MARG_W, FeasibleSet([0.0, 0.0]), 1e-4, p=1)
    assert rep.converged
    assert rep.history.certificate <= 1e-4
    assert np.all(np.diff(rep.history.best_F) <= 0)


def test_report_consistency(rng):
    m = toy(rng, y_hat=np.array([1.0, 1.0]))
    rep = solve_equilibrium(m, MARG_L, MARG_W, FeasibleSet([0.0, 0.0]), 1e-4)
    again = plan_from_duals(rep.duals, m.cost(rep.y))
    assert np.allclose(again.entries, rep.plan.entries, rtol=1e-12, atol=1e-15)
    assert rep.inner_iterations > rep.outer_iterations
    assert rep.f == pytest.approx(f_value(rep.y, m, MARG_L, MARG_W), abs=1e-8)


def test_nonsmooth_model_uses_subgradient_path(rng):
    model = KinkedModel(rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 3)))
    r = f_oracle(np.array([1.0, 2.0]), model, MARG_L, MARG_W, 1e-4)
    assert r.info["provenance"] == "holder_embedding"
    rep = solve_equilibrium(model, MARG_L, MARG_W, FeasibleSet([0.0, 0.0]), 1e-2, max_iter=20_000)
    assert rep.converged
    # the kink sits where it does: a coarse grid cannot do better than the certificate
    grid = np.linspace(0, 1.5, 31)
    best = min(f_value(np.array([a, b]), model, MARG_L, MARG_W) for a in grid for b in grid)
    assert rep.f <= best + 1e-2


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        solve_equilibrium(toy(rng), MARG_L, MARG_W, FeasibleSet([0.0]), 1e-3)
