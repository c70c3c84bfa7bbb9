"""Explanation metrics: drop in confidence, accuracy on explanations, STC,
deletion curves, a raw-gradient baseline and total variation.

Metrics that feed the model an explanation use the plain product
``mask * clip``, not the blur blend used during optimization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .models import Model
from .perturb import BlurKernel, gaussian_blur
from .tensor import ShapeError, reduce_channels, to_volume


class NoGroundTruthError(ValueError):
    """Raised when STC is requested against an empty box volume."""


@dataclass(frozen=True)
class MetricReport:
    dc: float
    acc: float
    stc: float
    deletion_auc: float
    n_clips: int
    tv: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def apply_mask(clip: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = to_volume(mask)
    if m.shape != (clip.shape[0],) + clip.shape[2:]:
        raise ShapeError(f"mask {np.shape(mask)} does not match clip {clip.shape}")
    return clip * m[:, None]


def _aligned(clips, masks, labels) -> int:
    n = len(clips)
    if n == 0:
        raise ValueError("metrics need at least one clip")
    if len(masks) != n or len(labels) != n:
        raise ValueError(f"misaligned inputs: {n} clips, {len(masks)} masks, {len(labels)} labels")
    return n


def drop_in_confidence(model: Model, clips: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                       labels: Sequence[int]) -> float:
    """Mean clamped drop of the label probability, in percent."""
    n = _aligned(clips, masks, labels)
    total = 0.0
    for clip, mask, label in zip(clips, masks, labels):
        y = model.score(clip, label)
        y_e = model.score(apply_mask(clip, mask), label)
        total += max(0.0, y - y_e)
    return 100.0 * total / n


def explanation_accuracy(model: Model, clips: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                         labels: Sequence[int]) -> float:
    n = _aligned(clips, masks, labels)
    hits = sum(model.predict(apply_mask(c, m)).label == int(y) for c, m, y in zip(clips, masks, labels))
    return 100.0 * hits / n


def stc(mask: np.ndarray, boxes: np.ndarray, tau: float = 0.5) -> float:
    """Percentage of box voxels whose mask value reaches ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    m, o = to_volume(mask), to_volume(boxes)
    if m.shape != o.shape:
        raise ShapeError(f"mask {m.shape} and boxes {o.shape} differ")
    inside = o == 1
    n_box = int(inside.sum())
    if n_box == 0:
        raise NoGroundTruthError("no ground-truth box voxels")
    return 100.0 * int(np.count_nonzero(inside & (m >= tau))) / n_box


@dataclass(frozen=True)
class DeletionCurve:
    fractions: np.ndarray
    confidences: np.ndarray
    auc: float


def deletion_curve(model: Model, clip: np.ndarray, saliency: np.ndarray, label: int,
                   steps: int = 16, fill: str = "zero",
                   blur: BlurKernel | None = None) -> DeletionCurve:
    """Confidence as the most salient voxels are removed first.

    Voxels are ranked by descending saliency (ties by flat index) and
    deleted in ``steps`` equal batches across all channels.  ``fill="zero"``
    sets them to 0; ``fill="blur"`` replaces them with the blurred clip.
    """
    if steps < 2:
        raise ValueError("deletion curve needs at least 2 steps")
    s = to_volume(saliency)
    if s.shape != (clip.shape[0],) + clip.shape[2:]:
        raise ShapeError(f"saliency {np.shape(saliency)} does not match clip {clip.shape}")
    if fill == "zero":
        replacement = np.zeros_like(clip)
    elif fill == "blur":
        replacement = gaussian_blur(clip, blur or BlurKernel(2.0))
    else:
        raise ValueError(f"unknown deletion fill {fill!r}")
    order = np.argsort(-s.ravel(), kind="stable")
    n = order.size
    keep = np.ones(n, dtype=bool)
    fractions, confs = [0.0], [model.score(clip, label)]
    done = 0
    for k in range(1, steps + 1):
        upto = round(k * n / steps)
        keep[order[done:upto]] = False
        done = upto
        km = keep.reshape(s.shape)[:, None]
        fractions.append(k / steps)
        confs.append(model.score(np.where(km, clip, replacement), label))
    fr, cf = np.array(fractions), np.array(confs)
    auc = float(np.sum((fr[1:] - fr[:-1]) * (cf[1:] + cf[:-1]) / 2.0))
    return DeletionCurve(fr, cf, auc)


def gradient_baseline(model: Model, clip: np.ndarray, label: int) -> np.ndarray:
    """Absolute input gradient summed over channels, T x H x W."""
    return reduce_channels(np.abs(model.input_gradient(clip, label)))


def total_variation(mask: np.ndarray) -> float:
    """Sum of absolute differences between neighbours along t, h and w."""
    m = to_volume(mask)
    return float(sum(np.abs(np.diff(m, axis=ax)).sum() for ax in range(3)))


def evaluate_masks(model: Model, items: Sequence, masks: Sequence[np.ndarray], tau: float = 0.5,
                   reference: str = "predicted", deletion_steps: int = 16) -> MetricReport:
    """Aggregate every metric over aligned clips and masks.

    ``reference="predicted"`` scores explanations against the model's own
    label on the unmasked clip; ``"ground-truth"`` uses the dataset label.
    """
    clips = [it.clip for it in items]
    if reference == "predicted":
        labels = [model.predict(c).label for c in clips]
    elif reference == "ground-truth":
        labels = [int(it.label) for it in items]
    else:
        raise ValueError(f"unknown accuracy reference {reference!r}")
    n = _aligned(clips, masks, labels)
    return MetricReport(
        dc=drop_in_confidence(model, clips, masks, labels),
        acc=explanation_accuracy(model, clips, masks, labels),
        stc=float(np.mean([stc(m, it.boxes, tau) for m, it in zip(masks, items)])),
        deletion_auc=float(np.mean([deletion_curve(model, c, m, y, deletion_steps).auc
                                    for c, m, y in zip(clips, masks, labels)])),
        n_clips=n,
        tv=float(np.mean([total_variation(m) for m in masks])),
    )
