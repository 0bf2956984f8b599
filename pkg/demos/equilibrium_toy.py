"""Equilibrium of a toy transport market with affine costs.

Route costs grow with the decision vector y; a quadratic term pulls y toward
a target. The outer method sees the transport problem only through inexact
gradients from the inner balancing solver.
"""

import numpy as np

from etk.equilibrium import FeasibleSet, f_value, solve_equilibrium, toy_cost_model

rng = np.random.default_rng(77)
model = toy_cost_model(rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 3, 2)), 1.0, [0.8, -1.5])
L = np.array([0.2, 0.3, 0.5])
W = np.array([0.45, 0.35, 0.2])
Q = FeasibleSet([0.0, 0.0])

for eps in (1e-2, 1e-3, 1e-4):
    rep = solve_equilibrium(model, L, W, Q, eps)
    print(f"eps={eps:<6.0e} y={np.round(rep.y, 4)} f={rep.f:.6f} outer={rep.outer_iterations} "
          f"inner={rep.inner_iterations}")

print("plan at the last solution:")
print(np.round(rep.plan.entries, 4))
print("f at the target (clamped):", round(f_value(Q.project(model.y_hat), model, L, W), 6))
