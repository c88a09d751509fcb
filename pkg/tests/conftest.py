import numpy as np
import pytest

from gode import autodiff as ad


@pytest.fixture(autouse=True)
def _f64():
    with ad.precision("f64"):
        yield


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_grads(f, leaves, eps=1e-4):
    """Max relative error between backward() and central differences over ``leaves``."""
    for p in leaves:
        p.grad = None
    ad.backward(f())
    analytic = [p.grad.copy() for p in leaves]
    worst = 0.0
    for p, g in zip(leaves, analytic):
        fd = ad.finite_difference_grad(lambda _p: f(), p, eps)
        worst = max(worst, rel_err(g, fd))
    return worst
