"""
Checking backpropagation against finite differences
===================================================

Every trainable tensor of a tiny model is perturbed coordinate by coordinate
in 64-bit precision and the central differences are compared with
``backward``.
"""

import numpy as np

from gode import autodiff as ad
from gode.cli import gradient_check, tiny_spec
from gode.models import build

rng = np.random.default_rng(1)
x, y = rng.uniform(size=(2, 1, 8, 8)), rng.integers(0, 10, 2)

with ad.precision("f64"):
    for family in ("resnet", "node", "gode"):
        model = build(tiny_spec(family), seed=0)
        errors = gradient_check(model, x, y)
        worst = max(errors, key=errors.get)
        print(f"{family:6s} {model.num_parameters():5d} params  worst {worst}: {errors[worst]:.1e}")
