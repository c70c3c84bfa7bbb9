"""Orthonormal 3-D DCT-II, low/high frequency band masks and gradient modulation.

The transform is applied separably as one dense N x N matrix per axis, so the
inverse is simply the transpose of each basis matrix.  Volumes are ordered
T x H x W throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, apply_along_axis

# guards ceil/floor thresholds against products like 0.7 * 10 = 7.000000000000001
_THRESH_EPS = 1e-9


@lru_cache(maxsize=64)
def _basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    b = math.sqrt(2.0 / n) * np.cos((2 * x + 1) * k * math.pi / (2 * n))
    b[0] /= math.sqrt(2.0)
    b.flags.writeable = False
    return b


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix: row k holds c_k sqrt(2/n) cos((2x+1) k pi / 2n)."""
    if n < 1:
        raise ValueError(f"DCT length must be positive, got {n}")
    return _basis(n)


@dataclass(frozen=True)
class DctPlan:
    """Per-axis DCT basis matrices for a fixed (T, H, W) volume."""

    axis_lengths: tuple[int, int, int]
    basis_matrices: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.axis_lengths)
        if len(dims) != 3:
            raise ShapeError(f"DctPlan needs three axis lengths, got {self.axis_lengths}")
        object.__setattr__(self, "axis_lengths", dims)
        object.__setattr__(self, "basis_matrices", tuple(dct_matrix(n) for n in dims))

    def _check(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.axis_lengths:
            raise ShapeError(f"volume shape {g.shape} does not match plan {self.axis_lengths}")
        return g


def dct3(plan: DctPlan, g: np.ndarray) -> np.ndarray:
    """Forward 3-D DCT of a T x H x W volume."""
    out = plan._check(g)
    for axis, basis in enumerate(plan.basis_matrices):
        out = apply_along_axis(out, axis, basis)
    return out


def idct3(plan: DctPlan, coeffs: np.ndarray) -> np.ndarray:
    """Inverse 3-D DCT; exact inverse of :func:`dct3` up to rounding."""
    out = plan._check(coeffs)
    for axis, basis in enumerate(plan.basis_matrices):
        out = apply_along_axis(out, axis, basis.T)
    return out


@dataclass(frozen=True)
class GfmConfig:
    """Fractions of the low (r_l) and high (r_h) ends of the spectrum to keep."""

    r_l: float
    r_h: float

    def __post_init__(self):
        if not (0.0 <= self.r_l <= 1.0 and 0.0 <= self.r_h <= 1.0):
            raise ValueError(f"r_l and r_h must lie in [0, 1], got r_l={self.r_l}, r_h={self.r_h}")
        if self.r_l + self.r_h > 1.0 + 1e-12:
            raise ValueError(f"r_l + r_h must not exceed 1, got {self.r_l} + {self.r_h}")


@dataclass(frozen=True)
class BandMaskPair:
    a_mask: np.ndarray
    b_mask: np.ndarray


def low_band_limit(r_l: float, n: int) -> int:
    """Number of leading frequencies kept on an axis of length n."""
    return min(n, max(0, math.ceil(r_l * n - _THRESH_EPS)))


def high_band_start(r_h: float, n: int) -> int:
    """First frequency index counted as high band on an axis of length n."""
    return min(n, max(0, math.floor((1.0 - r_h) * n + _THRESH_EPS)))


def build_band_masks(cfg: GfmConfig, dims: tuple[int, int, int]) -> BandMaskPair:
    """Binary T x H x W masks selecting the low corner cube and its high complement.

    A keeps (i, j, k) when every index is below ceil(r_l * N) on its axis.
    B keeps (i, j, k) when any index reaches floor((1 - r_h) * N).  On axes
    where rounding would make the two ranges touch, the high threshold is
    raised to the low limit so the bands never overlap.
    """
    if cfg.r_l + cfg.r_h > 1.0 + 1e-12:
        raise ValueError(f"r_l + r_h must not exceed 1, got {cfg.r_l} + {cfg.r_h}")
    dims = tuple(int(n) for n in dims)
    low = [np.arange(n) < low_band_limit(cfg.r_l, n) for n in dims]
    a = low[0][:, None, None] & low[1][None, :, None] & low[2][None, None, :]
    if cfg.r_h > 0:
        high = [np.arange(n) >= max(high_band_start(cfg.r_h, n), low_band_limit(cfg.r_l, n))
                for n in dims]
        b = high[0][:, None, None] | high[1][None, :, None] | high[2][None, None, :]
    else:
        b = np.zeros(dims, dtype=bool)
    return BandMaskPair(a.astype(np.float64), b.astype(np.float64))


def modulate_gradient(plan: DctPlan, grad: np.ndarray, masks: BandMaskPair) -> np.ndarray:
    """Band-filter a T x H x W gradient map in the DCT domain.

    Low and high bands are inverse-transformed separately and summed.
    """
    coeffs = dct3(plan, grad)
    if masks.a_mask.shape != coeffs.shape or masks.b_mask.shape != coeffs.shape:
        raise ShapeError(
            f"band masks {masks.a_mask.shape}/{masks.b_mask.shape} do not match gradient {coeffs.shape}"
        )
    return idct3(plan, masks.a_mask * coeffs) + idct3(plan, masks.b_mask * coeffs)
