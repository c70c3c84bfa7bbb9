"""Dense float64 tensors: validation, axis-wise linear maps and the FEPT file format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Clips are laid out T x C x H x W, masks T x 1 x H x W, and gradient or
frequency maps T x H x W.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

FEPT_MAGIC = b"FEPT"
FEPT_VERSION = 1

PathLike = Union[str, Path]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class FormatError(ValueError):
    """Raised when a binary file is malformed.

    Attributes:
        offset: byte offset at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteError(ValueError):
    """Raised when a tensor contains NaN or Inf."""


@dataclass(frozen=True)
class ClipShape:
    t: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("t", "c", "h", "w"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"ClipShape.{name} must be a positive integer, got {v!r}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.t, self.c, self.h, self.w)

    @property
    def volume(self) -> tuple[int, int, int]:
        """The (T, H, W) shape of masks and gradient maps."""
        return (self.t, self.h, self.w)

    @classmethod
    def of(cls, clip: np.ndarray) -> "ClipShape":
        if clip.ndim != 4:
            raise ShapeError(f"expected a rank-4 T x C x H x W clip, got shape {clip.shape}")
        return cls(*clip.shape)


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64, order="C")
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


def flat_index(shape: tuple[int, ...], index: tuple[int, ...]) -> int:
    """Row-major flat offset of ``index`` within ``shape``."""
    if len(shape) != len(index):
        raise ShapeError(f"index {index} does not match rank of shape {shape}")
    offset = 0
    for n, i in zip(shape, index):
        if not 0 <= i < n:
            raise IndexError(f"index {index} out of bounds for shape {shape}")
        offset = offset * n + i
    return offset


def elementwise(op: Callable[[np.ndarray, np.ndarray], np.ndarray],
                lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Apply a binary real function entry by entry.

    ``rhs`` may have a singleton channel axis (axis 1 of a rank-4 tensor)
    that is broadcast across the channels of ``lhs``. No other broadcasting
    is allowed.
    """
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.shape != rhs.shape:
        channel_bcast = (
            lhs.ndim == 4 and rhs.ndim == 4 and rhs.shape[1] == 1
            and lhs.shape[0] == rhs.shape[0] and lhs.shape[2:] == rhs.shape[2:]
        )
        if not channel_bcast:
            raise ShapeError(f"shape mismatch: {lhs.shape} vs {rhs.shape}")
    return as_tensor(op(lhs, rhs))


def apply_along_axis(t: np.ndarray, axis: int, matrix: np.ndarray) -> np.ndarray:
    """Replace every 1-D fiber along ``axis`` by ``matrix @ fiber``."""
    t = np.asarray(t, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    axis = axis % t.ndim
    n = t.shape[axis]
    if matrix.shape != (n, n):
        raise ShapeError(f"matrix of shape {matrix.shape} cannot act on axis {axis} of length {n}")
    # tensordot moves the contracted axis to the front
    out = np.tensordot(matrix, t, axes=([1], [axis]))
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def reduce_channels(x: np.ndarray) -> np.ndarray:
    """Sum a T x C x H x W tensor over its channel axis, giving T x H x W."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"reduce_channels expects rank 4, got shape {x.shape}")
    return np.ascontiguousarray(x.sum(axis=1))


def to_volume(m: np.ndarray) -> np.ndarray:
    """View a T x 1 x H x W mask as T x H x W; rank-3 input passes through."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 4:
        if m.shape[1] != 1:
            raise ShapeError(f"expected a single-channel mask, got shape {m.shape}")
        return m[:, 0]
    if m.ndim != 3:
        raise ShapeError(f"expected rank 3 or 4, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# FEPT binary format
# ---------------------------------------------------------------------------

def encode_tensor(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    if t.ndim > 255:
        raise ShapeError("rank too large for FEPT")
    header = FEPT_MAGIC + struct.pack("<BB", FEPT_VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f8", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one FEPT blob starting at ``offset``.

    Returns the tensor and the offset just past it.
    """
    if len(buf) - offset < 6:
        raise FormatError("truncated FEPT header", offset)
    if buf[offset:offset + 4] != FEPT_MAGIC:
        raise FormatError("bad FEPT magic", offset)
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != FEPT_VERSION:
        raise FormatError(f"unsupported FEPT version {version}", offset + 4)
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated FEPT dimensions", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated FEPT payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(dims), pos + nbytes


def save_tensor(t: np.ndarray, path: PathLike) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after FEPT payload", end)
    return t
