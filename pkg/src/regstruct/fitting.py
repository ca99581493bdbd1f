"""Least-squares exponent fits on dyadic sweeps.

Every scaling claim of the form value <= C * scale^gamma is operationalised
as an ordinary least-squares fit of log2(value) against log2(scale), with
values below an exactness floor excluded (and counted) so that identically
vanishing sweeps do not produce spurious slopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ExponentFit", "fit_exponent"]

FLOOR = 1e-12


@dataclass
class ExponentFit:
    points: list[tuple[float, float]]
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float
    n_used: int
    n_floored: int

    @property
    def constant(self) -> float:
        """Proportionality constant 2^intercept of the fitted power law."""
        return 2.0 ** self.intercept

    def row(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "slope_stderr": self.slope_stderr,
            "n_used": self.n_used,
            "n_floored": self.n_floored,
        }


def fit_exponent(pairs, floor: float = FLOOR) -> ExponentFit:
    """Fit value ~ C * scale^slope over (scale, value) pairs.

    Raises ValueError when fewer than 3 points survive the floor.
    """
    pts = [(float(s), float(v)) for s, v in pairs]
    used = [(s, v) for s, v in pts if v > floor]
    n_floored = len(pts) - len(used)
    if len(used) < 3:
        raise ValueError(f"need >= 3 usable points, got {len(used)} ({n_floored} below floor)")
    xs = np.log2([s for s, _ in used])
    ys = np.log2([v for _, v in used])
    n = len(xs)
    xm, ym = xs.mean(), ys.mean()
    sxx = float(np.sum((xs - xm) ** 2))
    slope = float(np.sum((xs - xm) * (ys - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = ys - (slope * xs + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ys - ym) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 else 1.0 - ss_res / ss_tot
    if n > 2 and sxx > 0:
        stderr = math.sqrt(ss_res / (n - 2) / sxx)
    else:
        stderr = 0.0
    return ExponentFit(pts, slope, intercept, r2, stderr, n, n_floored)
