"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() gradients of scalar-valued ``f`` against central
    differences at ``x``.

    ``f`` must be deterministic and is re-evaluated 2 * x.size times in
    double precision.  The relative error normalizes the max absolute
    deviation by the larger gradient magnitude.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(Tensor(x0.copy())).item()
        flat[i] = orig - h
        f_minus = f(Tensor(x0.copy())).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    rel = diff / scale if scale > 0 else diff
    return GradCheckReport(max_rel_error=float(rel), passed=bool(rel <= tol),
                           analytic=analytic, numeric=numeric)
