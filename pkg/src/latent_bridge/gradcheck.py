"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(Tensor(x)).item()
        flat[i] = orig - step
        f_minus = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(x)
    with Tape() as tape:
        loss = f(xt)
    return tape.backward(loss).get(xt)


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff against central differences, coordinate by coordinate.

    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps vanishing gradients from turning rounding noise into huge
    ratios.
    """
    x = np.array(x, dtype=np.float64)
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, step)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradCheckReport(analytic=a, numeric=n, rel_errors=np.abs(a - n) / denom, tol=tol)
