"""Small log-log fitting helpers shared by the diagnostics."""
from __future__ import annotations

import numpy as np


def loglog_slope(r, values, floor: float = 0.0) -> float:
    """Least-squares slope of log|values| against log r.

    Entries with |values| <= floor are dropped; NaN when fewer than two remain.
    """
    r = np.asarray(r, dtype=float).ravel()
    v = np.abs(np.asarray(values, dtype=float)).ravel()
    keep = (v > floor) & (r > 0) & np.isfinite(v)
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(r[keep]), np.log(v[keep]), 1)
    return float(slope)


def radial_rays(directions, radii) -> np.ndarray:
    """Points s*w for each unit direction w and radius s; shape (n_dir, n_r, n)."""
    w = np.atleast_2d(np.asarray(directions, dtype=float))
    s = np.asarray(radii, dtype=float)
    return w[:, None, :] * s[None, :, None]
