"""Central finite-difference oracle for certifying backward passes.

Every analytic gradient in this package is checked against this oracle
before any training code is trusted.  The comparison is elementwise
relative error |a - b| / max(|a|, |b|, 1e-8); a check passes when the
worst relative error is within tolerance or the worst absolute error is
below a small floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import SplitMix
from .tensor import Tensor

#: default central-difference step at 64-bit
DEFAULT_STEP = 1e-5
#: keep sampled grid coordinates at least this far from interpolation kinks
KINK_MARGIN = 1e-2

ScalarFn = Callable[[Tensor], float]
# sampler(rng) -> (f, x0, analytic gradient of f at x0)
Sampler = Callable[[SplitMix], tuple[ScalarFn, Tensor, Tensor]]


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "fail"
        return f"{self.op_name} {status} {self.max_rel_error:.3e} {self.max_abs_error:.3e}"


def finite_diff_grad(f: ScalarFn, x: Tensor, h: float = DEFAULT_STEP) -> Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per element."""
    if x.dtype != np.float64:
        raise TypeError("finite differences need float64 inputs")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += h
        fp = float(f(Tensor(xp)))
        xm = base.copy()
        xm.reshape(-1)[i] -= h
        fm = float(f(Tensor(xm)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near element {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def rel_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_op(
    op_name: str,
    sampler: Sampler,
    trials: int,
    tol_rel: float,
    tol_abs: float = 1e-9,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> GradCheckReport:
    """Run the oracle on randomized instances and aggregate worst-case errors."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    max_rel = 0.0
    max_abs = 0.0
    worst = 0
    for trial in range(trials):
        rng = SplitMix(seed, f"{op_name}/{trial}")
        f, x0, analytic = sampler(rng)
        fd = finite_diff_grad(f, x0, h)
        rel = rel_errors(analytic.data.reshape(-1), fd.data.reshape(-1))
        abs_err = np.abs(analytic.data.reshape(-1) - fd.data.reshape(-1))
        i = int(np.argmax(rel))
        if rel[i] > max_rel:
            max_rel = float(rel[i])
            worst = i
        max_abs = max(max_abs, float(abs_err.max()))
    passed = (max_rel <= tol_rel) or (max_abs <= tol_abs)
    return GradCheckReport(op_name, max_rel, max_abs, worst, passed)


def safe_grid_coords(rng: SplitMix, in_extent: int, n: int) -> np.ndarray:
    """Sample normalized coordinates away from interpolation kinks.

    The continuous index u is kept inside the unclamped range and its
    fractional part at least KINK_MARGIN from the texel centers, so a
    central difference of step h << margin never straddles a kink or the
    border clamp.
    """
    if in_extent < 2:
        return np.zeros(n)
    lo, hi = 0.0, float(in_extent - 1)
    u = rng.uniform_range(lo + KINK_MARGIN, hi - KINK_MARGIN, n)
    frac = u - np.floor(u)
    frac = KINK_MARGIN + frac * (1.0 - 2.0 * KINK_MARGIN)
    u = np.floor(u) + frac
    return (2.0 * u + 1.0) / in_extent - 1.0
