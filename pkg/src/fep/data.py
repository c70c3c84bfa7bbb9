"""Synthetic moving-blob videos with ground-truth boxes, FEPD persistence, PGM export."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import TemplateModel
from .tensor import ClipShape, FormatError, PathLike, ShapeError, decode_tensor, encode_tensor, to_volume

FEPD_MAGIC = b"FEPD"
FEPD_VERSION = 1

CLASS_NAMES = ("right", "left", "down", "up")
# (dy, dx) per frame for each class
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))

MAX_START_RETRIES = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    clip_shape: ClipShape = field(default_factory=lambda: ClipShape(8, 1, 16, 16))
    num_classes: int = 4
    blob_size: int = 4
    blob_intensity: float = 1.0
    noise_sigma: float = 0.0
    hf_noise_amplitude: float = 0.0
    seed: int = 0
    # max start offset from the entry edge along the motion axis; None = anywhere
    start_jitter: int | None = 2

    def __post_init__(self):
        if self.num_classes != len(DIRECTIONS):
            raise ValueError(f"only {len(DIRECTIONS)} motion classes are supported")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        s, cs = self.blob_size, self.clip_shape
        if s < 1 or s + cs.t - 1 > min(cs.h, cs.w):
            raise ValueError(
                f"a {s}px blob moving {cs.t - 1}px does not fit in a {cs.h}x{cs.w} frame")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_shape"] = list(self.clip_shape.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "clip_shape" in d and not isinstance(d["clip_shape"], ClipShape):
            d["clip_shape"] = ClipShape(*d["clip_shape"])
        return cls(**d)


@dataclass
class LabeledClip:
    clip: np.ndarray
    label: int
    boxes: np.ndarray


def _in_frame(start: tuple[int, int], label: int, spec: SyntheticSpec) -> bool:
    cs, s = spec.clip_shape, spec.blob_size
    dy, dx = DIRECTIONS[label]
    for t in (0, cs.t - 1):
        y, x = start[0] + dy * t, start[1] + dx * t
        if not (0 <= y <= cs.h - s and 0 <= x <= cs.w - s):
            return False
    j = spec.start_jitter
    if j is not None:
        along, limit = (start[1], cs.w - s) if dx else (start[0], cs.h - s)
        offset = along if (dx or dy) > 0 else limit - along
        if offset > j:
            return False
    return True


def admissible_starts(spec: SyntheticSpec, label: int) -> list[tuple[int, int]]:
    cs, s = spec.clip_shape, spec.blob_size
    return [(y, x) for y in range(cs.h - s + 1) for x in range(cs.w - s + 1)
            if _in_frame((y, x), label, spec)]


def distractor_pattern(spec: SyntheticSpec, label: int) -> np.ndarray:
    """Label-dependent checkerboard at the spatial (and, for classes 2-3, temporal) Nyquist rate."""
    cs = spec.clip_shape
    t, h, w = np.ogrid[:cs.t, :cs.h, :cs.w]
    checker = np.where((h + w) % 2 == 0, 1.0, -1.0) * np.ones((cs.t, 1, 1))
    if label >= 2:
        checker = checker * np.where(t % 2 == 0, 1.0, -1.0)
    sign = 1.0 if label % 2 == 0 else -1.0
    return sign * checker


def blob_clip(spec: SyntheticSpec, label: int, start: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free clip of a blob moving from ``start``, plus its box volume."""
    cs, s = spec.clip_shape, spec.blob_size
    dy, dx = DIRECTIONS[label]
    clip = np.zeros(cs.dims)
    boxes = np.zeros(cs.volume)
    for t in range(cs.t):
        y, x = start[0] + dy * t, start[1] + dx * t
        clip[t, :, y:y + s, x:x + s] = spec.blob_intensity
        boxes[t, y:y + s, x:x + s] = 1.0
    return clip, boxes


def generate_clip(spec: SyntheticSpec, index: int) -> LabeledClip:
    cs, s = spec.clip_shape, spec.blob_size
    rng = np.random.default_rng([spec.seed, index])
    label = index % spec.num_classes
    for _ in range(MAX_START_RETRIES):
        start = (int(rng.integers(0, cs.h - s + 1)), int(rng.integers(0, cs.w - s + 1)))
        if _in_frame(start, label, spec):
            break
    else:
        raise RuntimeError(f"could not place a {CLASS_NAMES[label]} blob inside the frame")
    clip, boxes = blob_clip(spec, label, start)
    if spec.noise_sigma > 0:
        clip += rng.normal(0.0, spec.noise_sigma, cs.dims)
    if spec.hf_noise_amplitude > 0:
        clip += spec.hf_noise_amplitude * distractor_pattern(spec, label)[:, None]
    return LabeledClip(clip, label, boxes)


def generate_dataset(spec: SyntheticSpec, n: int) -> list[LabeledClip]:
    """n clips with balanced labels (clip i has label i mod 4), each seeded by (seed, i)."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    return [generate_clip(spec, i) for i in range(n)]


def motion_templates(spec: SyntheticSpec) -> np.ndarray:
    """Bilinear (time x position) direction detectors, scaled to max |value| 1.

    For a blob translating at constant speed, the response of the matching
    detector does not depend on where the blob starts.
    """
    cs = spec.clip_shape
    t, h, w = np.meshgrid(np.arange(cs.t), np.arange(cs.h), np.arange(cs.w), indexing="ij")
    dt, dh, dw = t - (cs.t - 1) / 2, h - (cs.h - 1) / 2, w - (cs.w - 1) / 2
    mot = np.stack([dt * dw, -dt * dw, dt * dh, -dt * dh])
    mot = mot / np.abs(mot).max()
    return np.repeat(mot[:, :, None], cs.c, axis=2)


def analytic_template_model(spec: SyntheticSpec, temperature: float = 8.0,
                            motion_weight: float = 0.1) -> TemplateModel:
    """Matched filters built in closed form from the generator's motion patterns.

    Each template is the exact class-conditional mean of noise-free clips
    (averaged over every admissible start position) minus the mean over all
    classes, plus ``motion_weight`` times a bilinear direction detector.  The
    mean term localizes the blob; the detector term separates trajectories
    whose mean occupancy overlaps another class.
    """
    means = []
    for label in range(spec.num_classes):
        starts = admissible_starts(spec, label)
        means.append(np.mean([blob_clip(spec, label, st)[0] for st in starts], axis=0))
    means = np.stack(means)
    templates = means - means.mean(axis=0, keepdims=True)
    templates = templates + motion_weight * motion_templates(spec)
    return TemplateModel(templates, np.zeros(spec.num_classes), temperature)


# ---------------------------------------------------------------------------
# FEPD dataset files
# ---------------------------------------------------------------------------

def encode_dataset(clips: Sequence[LabeledClip]) -> bytes:
    parts = [FEPD_MAGIC, struct.pack("<BI", FEPD_VERSION, len(clips))]
    for item in clips:
        parts.append(struct.pack("<I", int(item.label)))
        parts.append(encode_tensor(item.boxes))
        parts.append(encode_tensor(item.clip))
    return b"".join(parts)


def decode_dataset(buf: bytes) -> list[LabeledClip]:
    if len(buf) < 9:
        raise FormatError("truncated FEPD header", 0)
    if buf[:4] != FEPD_MAGIC:
        raise FormatError("bad FEPD magic", 0)
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != FEPD_VERSION:
        raise FormatError(f"unsupported FEPD version {version} (expected {FEPD_VERSION})", 4)
    pos = 9
    out = []
    for _ in range(count):
        if len(buf) - pos < 4:
            raise FormatError("truncated FEPD clip record", pos)
        (label,) = struct.unpack_from("<I", buf, pos)
        boxes, pos = decode_tensor(buf, pos + 4)
        clip, pos = decode_tensor(buf, pos)
        out.append(LabeledClip(clip, int(label), boxes))
    if pos != len(buf):
        raise FormatError("trailing bytes after last FEPD clip", pos)
    return out


def save_dataset(clips: Sequence[LabeledClip], path: PathLike) -> None:
    Path(path).write_bytes(encode_dataset(clips))


def load_dataset(path: PathLike) -> list[LabeledClip]:
    return decode_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Heatmap export
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, frame: np.ndarray) -> None:
    pixels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise FormatError("not an 8-bit binary PGM", 0)
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_heatmap_frames(clip: np.ndarray, mask: np.ndarray, directory: PathLike) -> list[Path]:
    """Write clip_TTT.pgm, mask_TTT.pgm and overlay_TTT.pgm for every frame.

    The clip is channel-averaged and min-max normalized over the whole clip;
    the overlay is 0.5 * normalized clip + 0.5 * mask.
    """
    m = to_volume(mask)
    if clip.ndim != 4 or m.shape != (clip.shape[0],) + clip.shape[2:]:
        raise ShapeError(f"mask {np.shape(mask)} does not match clip {clip.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gray = clip.mean(axis=1)
    span = gray.max() - gray.min()
    norm = (gray - gray.min()) / span if span > 0 else np.zeros_like(gray)
    width = max(3, len(str(clip.shape[0] - 1)))
    written = []
    for t in range(clip.shape[0]):
        for name, frame in (("clip", norm[t]), ("mask", m[t]), ("overlay", 0.5 * norm[t] + 0.5 * m[t])):
            path = directory / f"{name}_{t:0{width}d}.pgm"
            _write_pgm(path, frame)
            written.append(path)
    return written
