"""Clamped uniform B-spline bases on ``[0, T]`` and spline combinations of tensors."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad


class InvalidBasisError(ValueError):
    pass


class DomainError(ValueError):
    pass


# relative slack for times produced by floating point step arithmetic
_SNAP = 1e-12


@dataclass(frozen=True)
class BSplineBasis:
    degree: int
    n_control: int
    knots: tuple[float, ...]
    domain_end: float

    def __post_init__(self):
        k, n = self.degree, self.n_control
        if k < 0:
            raise InvalidBasisError(f"degree must be >= 0, got {k}")
        if n < k + 1:
            raise InvalidBasisError(f"need n >= k+1 control points, got n={n}, k={k}")
        if len(self.knots) != n + k + 1:
            raise InvalidBasisError(f"expected {n + k + 1} knots, got {len(self.knots)}")
        if any(a > b for a, b in zip(self.knots, self.knots[1:])):
            raise InvalidBasisError("knot vector must be nondecreasing")
        kn, T = self.knots, self.domain_end
        if not (T > 0 and all(x == 0.0 for x in kn[: k + 1]) and all(x == T for x in kn[n:])):
            raise InvalidBasisError(f"knots must be clamped: {k + 1} zeros first and {k + 1} copies of T={T} last")
        spans = [i for i in range(len(self.knots) - 1) if self.knots[i] < self.knots[i + 1]]
        if not spans:
            raise InvalidBasisError("knot vector has no span of positive width")
        object.__setattr__(self, "_last_span", spans[-1])

    def __call__(self, t: float) -> np.ndarray:
        return eval_basis(self, t)


def make_clamped_uniform(k: int, n: int, T: float) -> BSplineBasis:
    """Knot vector with ``k+1`` copies of 0 and of ``T`` and uniform interior knots."""
    if k < 0:
        raise InvalidBasisError(f"degree must be >= 0, got {k}")
    if n < k + 1:
        raise InvalidBasisError(f"need n >= k+1 control points, got n={n}, k={k}")
    if not T > 0:
        raise InvalidBasisError(f"domain end T must be positive, got {T}")
    breaks = np.linspace(0.0, T, n - k + 1)
    breaks[-1] = T
    knots = np.concatenate([np.zeros(k), breaks, np.full(k, float(T))])
    return BSplineBasis(k, n, tuple(float(x) for x in knots), float(T))


def _locate(basis: BSplineBasis, t: float) -> tuple[float, int]:
    """Validate ``t`` and return it with the index of its knot span."""
    T = basis.domain_end
    tol = _SNAP * T
    if not (-tol <= t <= T + tol):
        raise DomainError(f"t={t} outside the spline domain [0, {T}]")
    t = min(max(float(t), 0.0), T)
    knots = basis.knots
    i = bisect.bisect_right(knots, t)
    # snap onto a knot if within rounding distance so aligned solver steps hit the intended span
    if i < len(knots) and knots[i] - t <= tol:
        t = knots[i]
    elif t - knots[i - 1] <= tol:
        t = knots[i - 1]
    if t >= T:
        # closed right end: last non-degenerate span
        return t, basis._last_span
    return t, bisect.bisect_right(knots, t) - 1


def eval_basis(basis: BSplineBasis, t: float) -> np.ndarray:
    """Values ``(B_{0,k}(t), ..., B_{n-1,k}(t))`` by the Cox-de Boor recursion.

    Only the ``k+1`` functions supported on the span of ``t`` are computed
    (triangular form of the recursion); since that span has positive width,
    the 0/0 terms of the recursion never arise there.
    """
    t, span = _locate(basis, t)
    k, knots = basis.degree, basis.knots
    vals = [1.0] + [0.0] * k
    left, right = [0.0] * (k + 1), [0.0] * (k + 1)
    for j in range(1, k + 1):
        left[j] = t - knots[span + 1 - j]
        right[j] = knots[span + j] - t
        carry = 0.0
        for r in range(j):
            temp = vals[r] / (right[r + 1] + left[j - r])
            vals[r] = carry + right[r + 1] * temp
            carry = left[j - r] * temp
        vals[j] = carry
    out = np.zeros(basis.n_control)
    out[span - k : span + 1] = vals
    return out


def eval_spline(basis: BSplineBasis, control: Sequence[ad.Tensor], t: float) -> ad.Tensor:
    """``sum_i B_{i,k}(t) * control[i]``, differentiable in every control tensor."""
    if len(control) != basis.n_control:
        raise ad.ShapeError(f"expected {basis.n_control} control tensors, got {len(control)}")
    return ad.lincomb(eval_basis(basis, t), control)
