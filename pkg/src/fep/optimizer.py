"""Gradient-ascent mask optimization, with optional DCT band filtering of each gradient.

Plain extremal perturbation (EP) ascends the mask objective with the raw
gradient.  The frequency-based variant (F-EP) first passes every full
resolution mask gradient through :func:`fep.dct.modulate_gradient` and only
then pulls it back onto the coarse logit grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dct import DctPlan, GfmConfig, build_band_masks, modulate_gradient
from .metrics import MetricReport, evaluate_masks
from .models import Model, mask_gradient
from .perturb import (AreaConfig, BlurKernel, MaskParams, area_loss, blend, expand_mask,
                      gaussian_blur, pullback_mask_grad)
from .tensor import as_tensor

logger = logging.getLogger(__name__)


class NonFiniteGradientError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite mask gradient at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 50.0
    iterations: int = 300
    lam: float = 1e-4
    area_a: float = 0.1
    gfm: GfmConfig | None = None
    blur: BlurKernel = field(default_factory=lambda: BlurKernel(2.0))
    mask_init: float = 0.5
    seed: int = 0
    step: int = 2
    smooth_sigma: float = 3.0
    mode: str = "prob"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.mask_init < 1.0:
            raise ValueError("mask_init must lie in (0, 1)")
        if self.mode not in ("prob", "logit"):
            raise ValueError(f"unknown score mode {self.mode!r}")
        AreaConfig(self.area_a, self.lam)

    @property
    def area(self) -> AreaConfig:
        return AreaConfig(self.area_a, self.lam)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "lambda": self.lam,
            "area_a": self.area_a,
            "gfm": None if self.gfm is None else {"r_l": self.gfm.r_l, "r_h": self.gfm.r_h},
            "blur_sigma": self.blur.sigma,
            "mask_init": self.mask_init,
            "seed": self.seed,
            "step": self.step,
            "smooth_sigma": self.smooth_sigma,
            "mode": self.mode,
        }


@dataclass
class ExplanationResult:
    mask: np.ndarray
    confidence_trace: list[float]
    objective_trace: list[float]
    iterations_run: int
    config_echo: OptimizerConfig
    # per-iteration grid / gradient snapshots, only kept when requested
    history: list[dict] | None = None


def explain(model: Model, clip: np.ndarray, class_index: int, cfg: OptimizerConfig,
            record_history: bool = False) -> ExplanationResult:
    """Optimize a T x 1 x H x W mask for ``class_index`` by gradient ascent."""
    clip = as_tensor(clip)
    model._check_class(class_index)
    t, _, h, w = clip.shape
    full = (t, h, w)
    params = MaskParams.constant(full, cfg.step, cfg.smooth_sigma, cfg.mask_init)
    blurred = gaussian_blur(clip, cfg.blur)
    area = cfg.area
    if cfg.gfm is not None:
        plan = DctPlan(full)
        bands = build_band_masks(cfg.gfm, full)

    conf_trace: list[float] = []
    obj_trace: list[float] = []
    history: list[dict] | None = [] if record_history else None
    for f in range(cfg.iterations):
        mask = expand_mask(params, full)
        conf = model.score(blend(clip, blurred, mask), class_index, cfg.mode)
        conf_trace.append(conf)
        obj_trace.append(conf - area.lam * area_loss(mask, area))

        grad = mask_gradient(model, clip, mask, cfg.blur, class_index, area, cfg.mode, blurred=blurred)
        raw = grad
        if cfg.gfm is not None:
            grad = modulate_gradient(plan, grad, bands)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f)
        update = pullback_mask_grad(params, grad)
        if history is not None:
            history.append({"grid": params.grid.copy(), "mask": mask, "raw_grad": raw,
                            "grad": grad, "update": update})
        params.grid = params.grid + cfg.epsilon * update

    final = expand_mask(params, full)
    if history is not None:
        history.append({"grid": params.grid.copy(), "mask": final})
    return ExplanationResult(final, conf_trace, obj_trace, cfg.iterations, cfg, history)


def explain_fep(model: Model, clip: np.ndarray, class_index: int, cfg: OptimizerConfig,
                record_history: bool = False) -> ExplanationResult:
    if cfg.gfm is None:
        raise ValueError("F-EP requires a band configuration (r_l, r_h)")
    return explain(model, clip, class_index, cfg, record_history)


@dataclass(frozen=True)
class AblationRow:
    rl: float
    rh: float
    stc: float
    dc: float
    acc: float
    tv: float
    valid: bool = True

    CSV_HEADER = "rl,rh,stc,dc,acc,tv"

    def csv(self) -> str:
        vals = [self.stc, self.dc, self.acc, self.tv]
        cells = ["nan" if not self.valid else f"{v:.6f}" for v in vals]
        return f"{self.rl:g},{self.rh:g}," + ",".join(cells)

    @classmethod
    def from_report(cls, rl: float, rh: float, report: MetricReport) -> "AblationRow":
        return cls(rl, rh, report.stc, report.dc, report.acc, report.tv)


def explain_dataset(model: Model, items: Sequence, cfg: OptimizerConfig) -> list[np.ndarray]:
    """Explain each clip's predicted class; returns the final masks in input order."""
    masks = []
    for item in items:
        label = model.predict(item.clip).label
        masks.append(explain(model, item.clip, label, cfg).mask)
    return masks


def ablate(model: Model, items: Sequence, pairs: Sequence[tuple[float, float]],
           cfg: OptimizerConfig, tau: float = 0.5,
           reference: str = "predicted") -> list[AblationRow]:
    """Run F-EP for every (r_l, r_h) pair and aggregate metrics over ``items``.

    Rows come back sorted by (r_l, r_h).  Invalid pairs produce a row with
    ``valid=False`` instead of raising.
    """
    rows = []
    for rl, rh in sorted(pairs):
        try:
            gfm = GfmConfig(rl, rh)
        except ValueError as exc:
            logger.warning("skipping (r_l=%g, r_h=%g): %s", rl, rh, exc)
            rows.append(AblationRow(rl, rh, math.nan, math.nan, math.nan, math.nan, valid=False))
            continue
        masks = explain_dataset(model, items, replace(cfg, gfm=gfm))
        report = evaluate_masks(model, items, masks, tau=tau, reference=reference)
        logger.info("r_l=%g r_h=%g  stc=%.2f dc=%.2f acc=%.2f", rl, rh, report.stc, report.dc, report.acc)
        rows.append(AblationRow.from_report(rl, rh, report))
    return rows
