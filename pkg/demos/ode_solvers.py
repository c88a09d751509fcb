"""
Euler and Dormand-Prince on a scalar ODE
========================================

Both solvers work on autodiff tensors, so gradients come from
backpropagating through the solver steps.
"""

import math

import numpy as np

from gode import autodiff as ad
from gode.odeint import SolverConfig, solve

grow = lambda z, t: z  # dz/dt = z, exact solution e^t
z0 = ad.Tensor(np.array([1.0]))

# Euler error halves with the step size (first order)
for h in (0.1, 0.05, 0.025, 0.0125):
    z = solve(grow, z0, SolverConfig("euler", 0, 1, step_size=h)).item()
    print(f"euler h={h:<7} z(1)={z:.8f}  error={abs(z - math.e):.2e}")

# the adaptive method tracks its tolerance
for rtol in (1e-3, 1e-6, 1e-9):
    calls = []
    f = lambda z, t: (calls.append(t), z)[1]
    z = solve(f, z0, SolverConfig("dopri5", 0, 1, rtol=rtol, atol=rtol * 1e-3)).item()
    print(f"dopri5 rtol={rtol:<6} z(1)={z:.12f}  error={abs(z - math.e):.2e}  evaluations={len(calls)}")

# d z(1) / d z0 for dz/dt = a z under Euler is (1 + a h)^N
a, h = -0.5, 0.05
x = ad.parameter([2.0])
ad.backward(ad.reduce_sum(solve(lambda z, t: ad.scale(z, a), x, SolverConfig("euler", 0, 1, h))))
print("gradient", x.grad[0], "closed form", (1 + a * h) ** 20)
