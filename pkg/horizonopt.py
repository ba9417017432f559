"""
Finite-horizon step schedules for gradient descent on quadratics whose
Hessian spectrum lies in [mu, L].

After T steps the error is multiplied by the polynomial
p(lam) = prod_t (1 - step_t * lam); the worst case over the spectrum is
max |p| on [mu, L]. Chebyshev nodes minimize that maximum exactly.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSchedule:
    steps: Tuple[float, ...]
    mu: float
    l: float

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(float(s) for s in self.steps))
        if not 0 < self.mu <= self.l:
            raise InvalidArgumentError(f"need 0 < mu <= l, got mu={self.mu}, l={self.l}")
        if any(not np.isfinite(s) or s <= 0 for s in self.steps):
            raise InvalidArgumentError(f"steps must be finite and > 0, got {self.steps}")

    @property
    def horizon(self) -> int:
        return len(self.steps)


def _poly_and_derivative(lam: np.ndarray, steps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """p(lam) and p'(lam) from prefix/suffix products of the linear factors."""
    factors = 1.0 - np.outer(lam, steps)
    ones = np.ones((lam.size, 1))
    prefix = np.cumprod(np.hstack([ones, factors]), axis=1)[:, :-1]
    suffix = np.cumprod(np.hstack([ones, factors[:, ::-1]]), axis=1)[:, :-1][:, ::-1]
    value = prefix[:, -1] * factors[:, -1]
    derivative = -(prefix * suffix) @ steps
    return value, derivative


def worst_case_factor(s: StepSchedule) -> float:
    """
    max over lam in [mu, L] of prod_t |1 - step_t lam|.

    Evaluated on a grid of max(10 T^2, 2) points plus the endpoints, with
    every sign change of p' on the grid refined to a root by Brent's method.
    """
    if s.horizon == 0:
        return 1.0
    steps = np.asarray(s.steps)
    if s.mu == s.l:
        return float(abs(np.prod(1.0 - steps * s.mu)))
    grid = np.linspace(s.mu, s.l, max(10 * s.horizon**2, 2))
    value, derivative = _poly_and_derivative(grid, steps)
    best = float(np.max(np.abs(value)))

    def slope(x: float) -> float:
        return float(_poly_and_derivative(np.array([x]), steps)[1][0])

    for i in np.nonzero(np.sign(derivative[:-1]) * np.sign(derivative[1:]) < 0)[0]:
        root = brentq(slope, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps)
        best = max(best, float(abs(_poly_and_derivative(np.array([root]), steps)[0][0])))
    return best


def chebyshev_minimax_value(t: int, mu: float, l: float) -> float:
    """1 / |T_t(rho)| with rho = (L + mu) / (L - mu)."""
    if mu == l:
        return 0.0
    rho = (l + mu) / (l - mu)
    return float(1.0 / np.cosh(t * np.arccosh(rho)))


def chebyshev_schedule(t: int, mu: float, l: float) -> StepSchedule:
    """Steps 1 / lam_i at the Chebyshev nodes of [mu, L]."""
    if t < 1:
        raise InvalidArgumentError(f"horizon must be >= 1, got {t}")
    if not 0 < mu <= l:
        raise InvalidArgumentError(f"need 0 < mu <= l, got mu={mu}, l={l}")
    i = np.arange(1, t + 1)
    nodes = (l + mu) / 2 + (l - mu) / 2 * np.cos((2 * i - 1) * np.pi / (2 * t))
    return StepSchedule(steps=tuple(1.0 / nodes), mu=mu, l=l)


def best_constant_schedule(t: int, mu: float, l: float) -> StepSchedule:
    """Constant step 2 / (mu + L), the minimizer of max(|1 - eta mu|, |1 - eta L|)."""
    if t < 1:
        raise InvalidArgumentError(f"horizon must be >= 1, got {t}")
    return StepSchedule(steps=(2.0 / (mu + l),) * t, mu=mu, l=l)


def gradient_descent_on_quadratic(schedule: StepSchedule, eigenvalues: Sequence[float],
                                  x0: Sequence[float]) -> float:
    """Run the schedule on f(x) = 0.5 sum lam_i x_i^2; returns ||x_T|| / ||x_0||."""
    lam = np.asarray(eigenvalues, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    if lam.shape != x.shape:
        raise InvalidArgumentError(f"eigenvalues {lam.shape} and x0 {x.shape} differ in shape")
    start = np.linalg.norm(x)
    if start == 0:
        raise InvalidArgumentError("x0 must be nonzero")
    for step in schedule.steps:
        x = x - step * lam * x
    return float(np.linalg.norm(x) / start)
