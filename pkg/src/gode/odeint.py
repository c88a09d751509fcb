"""Initial value problem solvers over tensors.

Both solvers run on the autodiff tape, so gradients of anything computed from
the terminal state are exact gradients of the discrete solver output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

Dynamics = Callable[[ad.Tensor, float], ad.Tensor]

METHODS = ("euler", "dopri5")


class SolverConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "euler"
    t0: float = 0.0
    t1: float = 1.0
    step_size: float = 0.05
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 10_000

    def validate(self) -> None:
        if self.method not in METHODS:
            raise SolverConfigError(f"unknown solver method {self.method!r}; expected one of {METHODS}")
        if not self.t1 > self.t0:
            raise SolverConfigError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        if self.method == "euler":
            euler_steps(self)
        else:
            if not (self.rtol > 0 and self.atol > 0):
                raise SolverConfigError("rtol and atol must be positive")
            if self.max_steps < 1:
                raise SolverConfigError("max_steps must be >= 1")


def euler_steps(cfg: SolverConfig) -> int:
    """Number of Euler steps; the interval must be an integral number of steps."""
    if not cfg.step_size > 0:
        raise SolverConfigError(f"step size must be positive, got {cfg.step_size}")
    ratio = (cfg.t1 - cfg.t0) / cfg.step_size
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 4 * np.finfo(float).eps * max(1.0, abs(ratio)):
        raise SolverConfigError(
            f"interval [{cfg.t0}, {cfg.t1}] is not an integral number of steps of {cfg.step_size}"
        )
    return int(n)


def _check_state(z: ad.Tensor, step: int, t: float) -> None:
    if not np.isfinite(z.data).all():
        raise DivergenceError(f"non-finite state at step {step} (t={t})")


def euler_solve(f: Dynamics, z0: ad.Tensor, cfg: SolverConfig) -> ad.Tensor:
    if cfg.method != "euler":
        raise SolverConfigError(f"euler_solve called with method {cfg.method!r}")
    n = euler_steps(cfg)
    h = cfg.step_size
    z = z0
    for j in range(n):
        t = cfg.t0 + j * h
        try:
            z = ad.add(z, ad.scale(f(z, t), h))
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"non-finite state at step {j} (t={t})") from exc
        _check_state(z, j, t)
    return z


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

# PI controller (Hairer, Norsett & Wanner II.4)
_SAFETY, _MIN_FACTOR, _MAX_FACTOR = 0.9, 0.2, 10.0
_BETA = 0.04
_ALPHA = 1 / 5 - 0.75 * _BETA


def _combine(z: ad.Tensor, h: float, coeffs, stages) -> ad.Tensor:
    terms = [(c, k) for c, k in zip(coeffs, stages) if c != 0.0]
    if not terms:
        return z
    incr = ad.lincomb([h * c for c, _ in terms], [k for _, k in terms])
    return ad.add(z, incr)


def dopri5_solve(f: Dynamics, z0: ad.Tensor, cfg: SolverConfig) -> ad.Tensor:
    """Adaptive Dormand-Prince RK5(4) with PI step control.

    Only accepted steps contribute to the returned state; rejected trials are
    discarded and never reached by ``backward``.
    """
    if cfg.method != "dopri5":
        raise SolverConfigError(f"dopri5_solve called with method {cfg.method!r}")
    cfg.validate()
    t, t1 = cfg.t0, cfg.t1
    h = 0.01 * (t1 - t)
    z = z0
    err_prev = 1.0
    accepted = 0
    attempts = 0
    while t < t1:
        if attempts >= cfg.max_steps:
            raise NonConvergenceError(f"dopri5 exceeded max_steps={cfg.max_steps} at t={t}")
        attempts += 1
        last = t + h >= t1 or math.isclose(t + h, t1, rel_tol=1e-12)
        if last:
            h = t1 - t
        try:
            stages = [f(z, t)]
            for i in range(1, 7):
                zi = _combine(z, h, _A[i], stages)
                stages.append(f(zi, t + _C[i] * h))
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"non-finite state in step {accepted} (t={t}, h={h})") from exc
        z_new = _combine(z, h, _B5, stages)
        err_vec = h * sum(e * k.data for e, k in zip(_E, stages) if e != 0.0)
        tol = cfg.atol + cfg.rtol * np.maximum(np.abs(z.data), np.abs(z_new.data))
        err = float(np.sqrt(np.mean((err_vec / tol) ** 2)))
        if not np.isfinite(err):
            raise DivergenceError(f"non-finite error estimate in step {accepted} (t={t}, h={h})")
        if err <= 1.0:
            _check_state(z_new, accepted, t + h)
            t = t1 if last else t + h
            z = z_new
            accepted += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** (-_ALPHA) * err_prev**_BETA
            factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err ** (-1 / 5))
        h = h * factor
    return z


def solve(f: Dynamics, z0: ad.Tensor, cfg: SolverConfig) -> ad.Tensor:
    if cfg.method == "euler":
        return euler_solve(f, z0, cfg)
    if cfg.method == "dopri5":
        return dopri5_solve(f, z0, cfg)
    raise SolverConfigError(f"unknown solver method {cfg.method!r}; expected one of {METHODS}")
