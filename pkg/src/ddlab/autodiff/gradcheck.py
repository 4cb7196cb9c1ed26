"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward


class NondeterministicFunctionError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float
    tol: float
    passed: bool


def check_gradient(fn, x, h=1e-5, tol=1e-4, floor=1e-6):
    """Compare the analytic gradient of scalar ``fn`` at ``x`` with central differences.

    ``fn`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps coordinates whose true
    gradient is ~0 from dividing rounding noise by zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)

    xt = Tensor(x, requires_grad=True)
    out = fn(xt)
    base = out.item()
    if out.requires_grad:
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros(x.shape)

    def value(arr):
        return fn(Tensor(arr)).item()

    if value(x) != base:
        raise NondeterministicFunctionError("fn returned different values for the same input")

    numeric = np.zeros(x.shape)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(x)
        flat[i] = orig - h
        fm = value(x)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(analytic, numeric, rel, worst, tol, worst < tol)
