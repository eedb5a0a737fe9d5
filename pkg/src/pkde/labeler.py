"""Pore-probability labels from pore positions by Gaussian kernel density.

Pixel (i, j) (column i, row j) is sampled at the continuous point (i, j),
the same frame pore coordinates live in.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import LayerImage, PoreSet


class EmptyPoreSetError(ValueError):
    pass


class DegenerateFieldWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KdeConfig:
    bandwidth: float = 20.0
    # None -> 6 * bandwidth; kernel tail there is exp(-18) of the peak
    truncation_radius: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be positive")
        if self.truncation_radius is not None and self.truncation_radius < 4 * self.bandwidth:
            raise ValueError("truncation_radius must be >= 4 * bandwidth")

    @property
    def radius(self) -> float:
        if self.truncation_radius is None:
            return 6.0 * self.bandwidth
        return float(self.truncation_radius)


def _sorted_points(pores: PoreSet) -> np.ndarray:
    # canonical order makes the float summation independent of input order
    pts = sorted((float(p.x), float(p.y)) for p in pores.pores)
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def kde_raw(pores: PoreSet, width: int, height: int, cfg: KdeConfig = KdeConfig()) -> LayerImage:
    q = pores.count
    if q == 0:
        raise EmptyPoreSetError("kde_raw needs at least one pore")
    pts = _sorted_points(pores)
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= width) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= height):
        raise ValueError("pore outside the image frame")

    beta = float(cfg.bandwidth)
    r = cfg.radius
    field = np.zeros((height, width), dtype=np.float64)
    norm = 1.0 / (2.0 * math.pi)
    for px, py in pts:
        x0 = max(0, int(math.ceil(px - r)))
        x1 = min(width - 1, int(math.floor(px + r)))
        y0 = max(0, int(math.ceil(py - r)))
        y1 = min(height - 1, int(math.floor(py + r)))
        if x0 > x1 or y0 > y1:
            continue
        dx = (np.arange(x0, x1 + 1, dtype=np.float64) - px) / beta
        dy = (np.arange(y0, y1 + 1, dtype=np.float64) - py) / beta
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        contrib = norm * np.exp(-0.5 * d2)
        contrib[d2 > (r / beta) ** 2] = 0.0
        field[y0:y1 + 1, x0:x1 + 1] += contrib
    field *= 1.0 / (beta * q)
    # unnormalised density is not a valid PP image; CT is the generic scalar modality
    return LayerImage("CT", field)


def kde_label(pores: PoreSet, width: int, height: int, cfg: KdeConfig = KdeConfig()) -> LayerImage:
    """Min-max normalised density as a PP image; all zeros when there are no pores."""
    if pores.count == 0:
        return LayerImage("PP", np.zeros((height, width)))
    raw = kde_raw(pores, width, height, cfg).data
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        warnings.warn(
            f"constant density field for part {pores.part} layer {pores.layer}; emitting zeros",
            DegenerateFieldWarning,
            stacklevel=2,
        )
        return LayerImage("PP", np.zeros((height, width)))
    out = (raw - lo) / (hi - lo)
    # exact endpoints regardless of rounding in the division
    out[raw == lo] = 0.0
    out[raw == hi] = 1.0
    return LayerImage("PP", np.clip(out, 0.0, 1.0))
