"""Desk-scale differentiable video classifiers and their exact input gradients.

Two reference models are provided. :class:`TemplateModel` is a linear matched
filter with closed-form gradients; :class:`TinyConvModel` is a valid-padding
3-D convolution, ReLU, global average pool and linear head with a
hand-written reverse pass.  Both expose the same small interface used by the
optimizer and the metrics.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .perturb import AreaConfig, BlurKernel, area_loss, area_loss_grad, blend, gaussian_blur
from .tensor import ClipShape, FormatError, PathLike, ShapeError, as_tensor, reduce_channels, to_volume

logger = logging.getLogger(__name__)

FEPM_MAGIC = b"FEPM"
FEPM_VERSION = 1
KIND_TEMPLATE = 0
KIND_TINYCONV = 1

MODES = ("prob", "logit")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: int

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        probs = softmax(logits)
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return cls(probs, int(np.argmax(probs)))


class Model:
    """Common interface: logits, prediction, class score and its input gradient.

    The class score is the softmax probability (``mode="prob"``) or the raw
    logit (``mode="logit"``).
    """

    num_classes: int
    clip_shape: ClipShape

    def logits(self, clip: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _logit_backward(self, clip: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of the logits with ``dlogits``."""
        raise NotImplementedError

    def _check_clip(self, clip: np.ndarray) -> np.ndarray:
        clip = as_tensor(clip)
        if clip.shape != self.clip_shape.dims:
            raise ShapeError(f"clip shape {clip.shape} does not match model {self.clip_shape.dims}")
        return clip

    def _check_class(self, class_index: int) -> None:
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class index {class_index} outside [0, {self.num_classes})")

    def predict(self, clip: np.ndarray) -> Prediction:
        return Prediction.from_logits(self.logits(self._check_clip(clip)))

    def score(self, clip: np.ndarray, class_index: int, mode: str = "prob") -> float:
        self._check_class(class_index)
        z = self.logits(self._check_clip(clip))
        if mode == "logit":
            return float(z[class_index])
        return float(softmax(z)[class_index])

    def input_gradient(self, clip: np.ndarray, class_index: int, mode: str = "prob") -> np.ndarray:
        """Gradient of the class score with respect to every clip element."""
        self._check_class(class_index)
        if mode not in MODES:
            raise ValueError(f"unknown score mode {mode!r}")
        clip = self._check_clip(clip)
        onehot = np.zeros(self.num_classes)
        onehot[class_index] = 1.0
        if mode == "logit":
            dlogits = onehot
        else:
            p = softmax(self.logits(clip))
            dlogits = p[class_index] * (onehot - p)
        return self._logit_backward(clip, dlogits)


class TemplateModel(Model):
    """softmax(<W_y, X> / temperature + b_y) with one template per class."""

    def __init__(self, templates: np.ndarray, bias: np.ndarray, temperature: float = 1.0):
        templates = as_tensor(templates)
        if templates.ndim != 5:
            raise ShapeError(f"templates must be Y x T x C x H x W, got {templates.shape}")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.templates = templates
        self.bias = as_tensor(bias).reshape(-1)
        if self.bias.shape != (templates.shape[0],):
            raise ShapeError(f"bias length {self.bias.shape} does not match {templates.shape[0]} classes")
        self.temperature = float(temperature)
        self.num_classes = templates.shape[0]
        self.clip_shape = ClipShape(*templates.shape[1:])

    def logits(self, clip: np.ndarray) -> np.ndarray:
        return np.tensordot(self.templates, clip, axes=4) / self.temperature + self.bias

    def _logit_backward(self, clip, dlogits):
        return np.tensordot(dlogits, self.templates, axes=1) / self.temperature


class TinyConvModel(Model):
    """conv3d (valid) -> ReLU -> global average pool -> linear head."""

    def __init__(self, kernel: np.ndarray, conv_bias: np.ndarray, head_w: np.ndarray,
                 head_b: np.ndarray, clip_shape: ClipShape):
        self.kernel = as_tensor(kernel)
        self.conv_bias = as_tensor(conv_bias).reshape(-1)
        self.head_w = as_tensor(head_w)
        self.head_b = as_tensor(head_b).reshape(-1)
        c_out, c_in = self.kernel.shape[:2]
        if self.kernel.ndim != 5 or c_in != clip_shape.c:
            raise ShapeError(f"kernel {self.kernel.shape} incompatible with clip {clip_shape.dims}")
        if self.conv_bias.shape != (c_out,) or self.head_w.shape[1] != c_out:
            raise ShapeError("conv bias / head weight shapes disagree with the kernel")
        if self.head_b.shape != (self.head_w.shape[0],):
            raise ShapeError("head bias length must equal the number of classes")
        kt, kh, kw = self.kernel.shape[2:]
        if kt > clip_shape.t or kh > clip_shape.h or kw > clip_shape.w:
            raise ShapeError("kernel larger than the clip")
        self.num_classes = self.head_w.shape[0]
        self.clip_shape = clip_shape

    @classmethod
    def random(cls, clip_shape: ClipShape, num_classes: int, channels: int = 8,
               ksize: tuple[int, int, int] = (3, 3, 3), seed: int = 0) -> "TinyConvModel":
        rng = np.random.default_rng(seed)
        fan_in = clip_shape.c * int(np.prod(ksize))
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), (channels, clip_shape.c) + tuple(ksize))
        conv_bias = rng.normal(0.0, 0.1, channels)
        head_w = rng.normal(0.0, np.sqrt(1.0 / channels), (num_classes, channels))
        head_b = np.zeros(num_classes)
        return cls(kernel, conv_bias, head_w, head_b, clip_shape)

    def _windows(self, clip: np.ndarray) -> np.ndarray:
        # C x T' x H' x W' x kt x kh x kw view
        return sliding_window_view(clip.transpose(1, 0, 2, 3), self.kernel.shape[2:], axis=(1, 2, 3))

    def preactivations(self, clip: np.ndarray) -> np.ndarray:
        win = self._windows(clip)
        z = np.einsum("cthwijk,ocijk->othw", win, self.kernel, optimize=True)
        return z + self.conv_bias[:, None, None, None]

    def logits(self, clip: np.ndarray) -> np.ndarray:
        a = np.maximum(self.preactivations(clip), 0.0)
        return self.head_w @ a.mean(axis=(1, 2, 3)) + self.head_b

    def _backward(self, clip: np.ndarray, dlogits: np.ndarray, want_params: bool):
        z = self.preactivations(clip)
        a = np.maximum(z, 0.0)
        pooled = a.mean(axis=(1, 2, 3))
        n_out = z[0].size
        dpooled = self.head_w.T @ dlogits
        # ReLU subgradient at exactly 0 is taken as 0
        dz = (z > 0) * (dpooled[:, None, None, None] / n_out)
        kt, kh, kw = self.kernel.shape[2:]
        t_o, h_o, w_o = z.shape[1:]
        dx = np.zeros((clip.shape[1],) + (clip.shape[0],) + clip.shape[2:])
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    dx[:, i:i + t_o, j:j + h_o, k:k + w_o] += np.einsum(
                        "othw,oc->cthw", dz, self.kernel[:, :, i, j, k])
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if not want_params:
            return dx
        win = self._windows(clip)
        grads = {
            "kernel": np.einsum("othw,cthwijk->ocijk", dz, win, optimize=True),
            "conv_bias": dz.sum(axis=(1, 2, 3)),
            "head_w": np.outer(dlogits, pooled),
            "head_b": dlogits.copy(),
        }
        return dx, grads

    def _logit_backward(self, clip, dlogits):
        return self._backward(clip, dlogits, want_params=False)

    def param_gradients(self, clip: np.ndarray, label: int) -> tuple[float, dict]:
        """Cross-entropy loss of one clip and its parameter gradients."""
        clip = self._check_clip(clip)
        p = softmax(self.logits(clip))
        dlogits = p.copy()
        dlogits[label] -= 1.0
        _, grads = self._backward(clip, dlogits, want_params=True)
        return float(-np.log(max(p[label], 1e-300))), grads


def train_tiny_conv(clips: Sequence[np.ndarray], labels: Sequence[int], num_classes: int,
                    epochs: int = 30, lr: float = 0.2, channels: int = 8,
                    seed: int = 0) -> TinyConvModel:
    """Plain per-sample SGD on cross-entropy with a seeded shuffle."""
    if not clips:
        raise ValueError("cannot train on an empty dataset")
    model = TinyConvModel.random(ClipShape.of(clips[0]), num_classes, channels=channels, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for epoch in range(epochs):
        total = 0.0
        for idx in rng.permutation(len(clips)):
            loss, grads = model.param_gradients(clips[idx], int(labels[idx]))
            total += loss
            for name, g in grads.items():
                setattr(model, name, getattr(model, name) - lr * g)
        logger.debug("epoch %d  mean loss %.4f", epoch, total / len(clips))
    return model


# ---------------------------------------------------------------------------
# Mask objective and gradients
# ---------------------------------------------------------------------------

def mask_objective(model: Model, clip: np.ndarray, m: np.ndarray, k: BlurKernel,
                   class_index: int, area: AreaConfig, mode: str = "prob",
                   blurred: np.ndarray | None = None) -> float:
    """Class score on the blended clip minus the weighted area penalty."""
    if blurred is None:
        blurred = gaussian_blur(clip, k)
    score = model.score(blend(clip, blurred, m), class_index, mode)
    return score - area.lam * area_loss(m, area)


def mask_gradient(model: Model, clip: np.ndarray, m: np.ndarray, k: BlurKernel,
                  class_index: int, area: AreaConfig, mode: str = "prob",
                  blurred: np.ndarray | None = None) -> np.ndarray:
    """T x H x W gradient of :func:`mask_objective` with respect to the mask."""
    clip = as_tensor(clip)
    if blurred is None:
        blurred = gaussian_blur(clip, k)
    diff = clip - blurred
    g_in = model.input_gradient(blend(clip, blurred, m), class_index, mode)
    g = reduce_channels(g_in * diff)
    if area.lam:
        g = g - area.lam * to_volume(area_loss_grad(m, area))
    return g


def finite_difference_oracle(objective: Callable[[np.ndarray], float], point: np.ndarray,
                             step: float, indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient, optionally only at the given flat indices.

    Entries not in ``indices`` are left at zero.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat, gflat = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = objective(point)
        flat[i] = orig - step
        f_minus = objective(point)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# FEPM checkpoints
# ---------------------------------------------------------------------------

def _encode(kind: int, dims: Sequence[int], payload: Sequence[np.ndarray]) -> bytes:
    head = FEPM_MAGIC + struct.pack("<BBB", FEPM_VERSION, kind, len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    body = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in payload])
    return head + body.astype("<f8").tobytes()


def save_model(model: Model, path: PathLike) -> None:
    if isinstance(model, TemplateModel):
        dims = (model.num_classes,) + model.clip_shape.dims
        blob = _encode(KIND_TEMPLATE, dims, [np.array([model.temperature]), model.bias, model.templates])
    elif isinstance(model, TinyConvModel):
        dims = (model.num_classes,) + model.kernel.shape[0:1] + model.kernel.shape[2:] + model.clip_shape.dims
        blob = _encode(KIND_TINYCONV, dims, [model.kernel, model.conv_bias, model.head_w, model.head_b])
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    Path(path).write_bytes(blob)


def load_model(path: PathLike) -> Model:
    buf = Path(path).read_bytes()
    if len(buf) < 7:
        raise FormatError("truncated FEPM header", 0)
    if buf[:4] != FEPM_MAGIC:
        raise FormatError("bad FEPM magic", 0)
    version, kind, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != FEPM_VERSION:
        raise FormatError(f"unsupported FEPM version {version}", 4)
    pos = 7
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated FEPM shape header", pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    if (len(buf) - pos) % 8:
        raise FormatError("FEPM payload is not a whole number of f64 values", pos)
    payload = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)

    used = 0

    def take(n: int) -> np.ndarray:
        nonlocal used
        if used + n > payload.size:
            raise FormatError("truncated FEPM payload", pos + 8 * used)
        used += n
        return payload[used - n:used]

    if kind == KIND_TEMPLATE and ndim == 5:
        y, t, c, h, w = dims
        temperature = take(1)[0]
        bias = take(y)
        templates = take(y * t * c * h * w).reshape(dims)
        model: Model = TemplateModel(templates, bias, temperature)
    elif kind == KIND_TINYCONV and ndim == 9:
        y, c_out, kt, kh, kw, t, c, h, w = dims
        kernel = take(c_out * c * kt * kh * kw).reshape(c_out, c, kt, kh, kw)
        conv_bias = take(c_out)
        head_w = take(y * c_out).reshape(y, c_out)
        head_b = take(y)
        model = TinyConvModel(kernel, conv_bias, head_w, head_b, ClipShape(t, c, h, w))
    else:
        raise FormatError(f"unknown FEPM model kind {kind} with {ndim} dims", 5)
    if used != payload.size:
        raise FormatError("trailing bytes after FEPM payload", pos + 8 * used)
    return model
