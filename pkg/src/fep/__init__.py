"""Frequency-based extremal perturbation (F-EP) saliency for video classifiers."""

from .dct import BandMaskPair, DctPlan, GfmConfig, build_band_masks, dct3, idct3, modulate_gradient
from .models import Prediction, TemplateModel, TinyConvModel, load_model, save_model
from .optimizer import ExplanationResult, OptimizerConfig, ablate, explain, explain_fep
from .perturb import AreaConfig, BlurKernel, MaskParams, perturb
from .tensor import ClipShape

__version__ = "0.1.0"

__all__ = [
    "AreaConfig", "BandMaskPair", "BlurKernel", "ClipShape", "DctPlan", "ExplanationResult",
    "GfmConfig", "MaskParams", "OptimizerConfig", "Prediction", "TemplateModel", "TinyConvModel",
    "ablate", "build_band_masks", "dct3", "explain", "explain_fep", "idct3", "load_model",
    "modulate_gradient", "perturb", "save_model",
]
