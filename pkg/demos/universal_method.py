"""The universal gradient method adapting to smooth and nonsmooth objectives.

No Lipschitz constant is supplied: the line search finds a local curvature
and the iteration counts follow the smoothness of the problem.
"""

import numpy as np

from etk.oracle import exact_oracle
from etk.universal_gd import ProxSetup, universal_method

rng = np.random.default_rng(0)
A = rng.normal(size=(200, 5))
b = np.sign(rng.normal(size=200))
logistic = exact_oracle(lambda x: float(np.logaddexp(0, -b * (A @ x)).mean()),
                        lambda x: A.T @ (-b / (1 + np.exp(b * (A @ x)))) / len(b))
kink = exact_oracle(lambda y: float(np.abs(y).sum()), np.sign)

print("eps      logistic p=1   |y| p=0")
for eps in (1e-2, 1e-3, 1e-4):
    _, h1 = universal_method(logistic, ProxSetup.free(5), np.zeros(5), eps, p=1, radius=10.0)
    _, h0 = universal_method(kink, ProxSetup.free(1), np.array([0.03]), eps, p=0, max_iter=10**6)
    print(f"{eps:<8.0e} {h1.iterations:<14d} {h0.iterations}")

y, h = universal_method(logistic, ProxSetup.free(5), np.zeros(5), 1e-6, p=1, radius=10.0)
print("accepted curvature range on the logistic run:", f"{h.curvature.min():.3g} .. {h.curvature.max():.3g}")
