"""Blur perturbation, smooth mask parameterization and the area regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, as_tensor


@dataclass(frozen=True)
class BlurKernel:
    """Truncated, normalized 1-D Gaussian applied separably over H and W."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"blur sigma must be positive, got {self.sigma}")

    @property
    def radius(self) -> int:
        return int(math.ceil(3.0 * self.sigma))

    @property
    def weights(self) -> np.ndarray:
        x = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        w = np.exp(-0.5 * (x / self.sigma) ** 2)
        return w / w.sum()


@dataclass(frozen=True)
class AreaConfig:
    a: float
    lam: float

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ValueError(f"target area a must lie in (0, 1), got {self.a}")
        if self.lam < 0:
            raise ValueError(f"area weight must be non-negative, got {self.lam}")


@dataclass
class MaskParams:
    """Coarse per-frame logit grid, T x 1 x Hg x Wg.

    Grid node (i, j) sits at pixel (i * step, j * step).  ``smooth_sigma == 0``
    selects the nearest-node limit of the Gaussian interpolation.
    """

    grid: np.ndarray
    step: int
    smooth_sigma: float

    def __post_init__(self):
        if self.step < 1:
            raise ValueError(f"grid step must be >= 1, got {self.step}")
        if self.smooth_sigma < 0:
            raise ValueError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")
        if self.grid.ndim != 4 or self.grid.shape[1] != 1:
            raise ShapeError(f"mask grid must be T x 1 x Hg x Wg, got {self.grid.shape}")

    @staticmethod
    def grid_dims(h: int, w: int, step: int) -> tuple[int, int]:
        return -(-h // step), -(-w // step)

    @classmethod
    def constant(cls, full: tuple[int, int, int], step: int, smooth_sigma: float,
                 value: float) -> "MaskParams":
        """Grid whose expanded mask equals ``value`` everywhere (0 < value < 1)."""
        t, h, w = full
        hg, wg = cls.grid_dims(h, w, step)
        logit = math.log(value / (1.0 - value))
        return cls(np.full((t, 1, hg, wg), logit), step, smooth_sigma)


@lru_cache(maxsize=32)
def _interp_matrix(n: int, step: int, sigma: float) -> np.ndarray:
    """Row-normalized n x ng matrix of Gaussian weights from grid nodes to pixels."""
    ng = -(-n // step)
    d2 = (np.arange(n)[:, None] - step * np.arange(ng)[None, :]).astype(np.float64) ** 2
    if sigma == 0:
        w = (d2 == d2.min(axis=1, keepdims=True)).astype(np.float64)
    else:
        logw = -d2 / (2.0 * sigma * sigma)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w = w / w.sum(axis=1, keepdims=True)
    w.flags.writeable = False
    return w


def _logistic(z: np.ndarray) -> np.ndarray:
    # numerically stable on both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_grid(p: MaskParams, full: tuple[int, int, int]) -> None:
    t, h, w = full
    hg, wg = MaskParams.grid_dims(h, w, p.step)
    if p.grid.shape != (t, 1, hg, wg):
        raise ShapeError(f"grid {p.grid.shape} inconsistent with volume {full} at step {p.step}")


def expand_mask(p: MaskParams, full: tuple[int, int, int]) -> np.ndarray:
    """Squash the grid through the logistic and interpolate to T x 1 x H x W."""
    _check_grid(p, full)
    _, h, w = full
    uh = _interp_matrix(h, p.step, p.smooth_sigma)
    uw = _interp_matrix(w, p.step, p.smooth_sigma)
    s = _logistic(p.grid[:, 0])
    # interpolate offsets from one node so constant grids expand exactly
    ref = s[:, :1, :1]
    m = ref + np.einsum("hi,tij,wj->thw", uh, s - ref, uw)
    return np.clip(m, 0.0, 1.0)[:, None]


def pullback_mask_grad(p: MaskParams, grad: np.ndarray) -> np.ndarray:
    """Chain a T x H x W gradient w.r.t. the expanded mask back onto the grid."""
    t, h, w = grad.shape
    _check_grid(p, (t, h, w))
    uh = _interp_matrix(h, p.step, p.smooth_sigma)
    uw = _interp_matrix(w, p.step, p.smooth_sigma)
    s = _logistic(p.grid[:, 0])
    g = np.einsum("hi,thw,wj->tij", uh, grad, uw)
    return (s * (1.0 - s) * g)[:, None]


def gaussian_blur(clip: np.ndarray, k: BlurKernel) -> np.ndarray:
    """Blur every frame and channel spatially with symmetric boundary reflection.

    Symmetric (half-sample) reflection keeps the operator symmetric, so the
    total mass of each frame is preserved.
    """
    clip = as_tensor(clip)
    if clip.ndim != 4:
        raise ShapeError(f"expected a T x C x H x W clip, got {clip.shape}")
    wts = k.weights
    r = k.radius
    out = clip
    for axis in (2, 3):
        n = out.shape[axis]
        pad = [(0, 0)] * 4
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, wt in enumerate(wts):
            acc += wt * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return np.ascontiguousarray(out)


def blend(clip: np.ndarray, blurred: np.ndarray, m: np.ndarray) -> np.ndarray:
    """m * clip + (1 - m) * blurred with the mask broadcast over channels."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    if m.shape != (clip.shape[0], 1) + clip.shape[2:]:
        raise ShapeError(f"mask {m.shape} does not match clip {clip.shape}")
    # this form is exact at m == 0 and m == 1
    return m * clip + (1.0 - m) * blurred


def perturb(clip: np.ndarray, m: np.ndarray, k: BlurKernel) -> np.ndarray:
    """Keep the clip where the mask is 1 and replace it by its blur where it is 0."""
    clip = as_tensor(clip)
    return blend(clip, gaussian_blur(clip, k), m)


def _area_template(n: int, a: float) -> np.ndarray:
    r = np.zeros(n)
    r[: int(round(a * n))] = 1.0
    return r


def _sorted_order(m: np.ndarray) -> np.ndarray:
    # descending, ties resolved by flat index
    return np.argsort(-m.ravel(), kind="stable")


def area_loss(m: np.ndarray, cfg: AreaConfig) -> float:
    """Squared distance between the descending-sorted mask and a 0/1 area template."""
    flat = np.asarray(m, dtype=np.float64).ravel()
    srt = flat[_sorted_order(flat)]
    return float(np.sum((srt - _area_template(flat.size, cfg.a)) ** 2))


def area_loss_grad(m: np.ndarray, cfg: AreaConfig) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    flat = m.ravel()
    order = _sorted_order(flat)
    g = np.empty_like(flat)
    g[order] = 2.0 * (flat[order] - _area_template(flat.size, cfg.a))
    return g.reshape(m.shape)
