"""
Layer-varying weights from B-spline bases
=========================================

A Neural-GODE kernel is a curve over integration time: a weighted sum of
control kernels, with weights given by a clamped B-spline basis on [0, T].
"""

import numpy as np

from gode.bspline import eval_basis, make_clamped_uniform

# degree 1 with 4 control points: hat functions on knots 0, 1/3, 2/3, 1
basis = make_clamped_uniform(k=1, n=4, T=1.0)
print("knots:", np.round(basis.knots, 4))

for t in np.linspace(0, 1, 7):
    print(f"t={t:.3f}  weights={np.round(eval_basis(basis, t), 3)}")

# higher degrees give smoother curves; the weights always sum to one
for k in range(4):
    b = make_clamped_uniform(k, 6, 1.0)
    w = eval_basis(b, 0.42)
    print(f"k={k}: B(0.42) = {np.round(w, 3)}  sum={w.sum():.15f}")

# k=0, n=1 is a single constant weight: the kernel no longer depends on t
print("constant basis:", [eval_basis(make_clamped_uniform(0, 1, 1.0), t)[0] for t in (0, 0.5, 1)])
