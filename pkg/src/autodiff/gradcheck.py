"""Finite-difference verification of backward() gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .tensor import Value, backward

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: List[int] = field(default_factory=list)
    aborted: bool = False
    reason: Optional[str] = None


def _evaluate(f: Callable[[Value], Value], data: np.ndarray) -> float:
    out = f(Value(data))
    return float(np.asarray(out.data).reshape(-1)[0])


def grad_check(f: Callable[[Value], Value], x: Value, eps: float = 1e-5, tol: float = 1e-5,
               atol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` at ``x`` with central differences.

    Coordinates where ``f`` has a kink (one-sided slopes disagree and the gap does
    not shrink with the step) are excluded from the error and listed in
    ``excluded``. A non-finite ``f`` at any offset aborts the check.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    leaf = Value(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    empty = np.zeros_like(base)
    f0 = float(out.data.reshape(-1)[0])
    if not np.isfinite(f0):
        return GradCheckReport(np.inf, False, empty, empty, aborted=True,
                               reason=f"f(x) is not finite: {f0}")
    backward(out)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(base)
    excluded: List[int] = []
    flat = base.reshape(-1)
    for i in range(flat.size):
        values = {}
        for step in (eps, -eps, eps / 2, -eps / 2):
            shifted = flat.copy()
            shifted[i] += step
            values[step] = _evaluate(f, shifted.reshape(base.shape))
            if not np.isfinite(values[step]):
                logger.warning(f"grad_check aborted: f not finite at coordinate {i}")
                return GradCheckReport(np.inf, False, analytic, numeric, excluded, True,
                                       f"f is not finite at coordinate {i} offset {step}")
        numeric.reshape(-1)[i] = (values[eps] - values[-eps]) / (2 * eps)
        gap = abs((values[eps] - f0) / eps - (f0 - values[-eps]) / eps)
        half_gap = abs((values[eps / 2] - f0) / (eps / 2) - (f0 - values[-eps / 2]) / (eps / 2))
        noise = 1e-6 * max(1.0, abs(f0)) / eps
        if gap > noise and half_gap > 0.75 * gap:
            excluded.append(i)

    a, n = analytic.reshape(-1), numeric.reshape(-1)
    errors = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    if excluded:
        errors[excluded] = 0.0
    max_err = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(max_err, max_err < tol, analytic, numeric, excluded)
