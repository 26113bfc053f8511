"""Binary mask value types, overlap arithmetic and run-length serialization.

Masks are stored as read-only ``(height, width)`` boolean numpy arrays so they
can be shared freely between predictions without defensive copies.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, ParseError


def _frozen_bool(arr) -> np.ndarray:
    out = np.array(arr, dtype=bool, copy=True)
    out.setflags(write=False)
    return out


class BinaryMask2D:
    """Immutable 2D binary mask, row-major with shape ``(height, width)``."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = _frozen_bool(bits)
        if arr.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidArgumentError(f"mask dimensions must be >= 1, got {arr.shape}")
        self._bits = arr

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask2D":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: Iterable[tuple[int, int]]) -> "BinaryMask2D":
        """Build a mask from ``(x, y)`` pixel coordinates."""
        arr = np.zeros((height, width), dtype=bool)
        for x, y in pixels:
            arr[y, x] = True
        return cls(arr)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    @property
    def area(self) -> int:
        return int(self._bits.sum())

    def is_empty(self) -> bool:
        return not self._bits.any()

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask2D):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask2D({self.width}x{self.height}, area={self.area})"


@dataclass(frozen=True)
class ScoredMask2D:
    """One per-slice prediction: a non-empty mask with its probability score.

    ``member_scores`` holds the original scores that were averaged into
    ``score`` when this prediction is the result of an in-slice merge.
    """

    mask: BinaryMask2D
    score: float
    slice_index: int = 0
    member_scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.mask, BinaryMask2D):
            object.__setattr__(self, "mask", BinaryMask2D(self.mask))
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise InvalidArgumentError(f"score must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)
        if int(self.slice_index) < 0:
            raise InvalidArgumentError("slice_index must be non-negative")
        object.__setattr__(self, "slice_index", int(self.slice_index))
        if self.mask.is_empty():
            raise InvalidArgumentError("scored masks must contain at least one pixel")
        if self.member_scores is not None:
            object.__setattr__(self, "member_scores", tuple(float(s) for s in self.member_scores))

    @property
    def sources(self) -> tuple[float, ...]:
        """Original scores this prediction was built from."""
        return self.member_scores if self.member_scores is not None else (self.score,)


class SoftMask2D:
    """Averaged mask with values in [0, 1] prior to binarization."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=float, copy=True)
        if arr.ndim != 2:
            raise InvalidArgumentError("soft mask must be 2D")
        if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("soft mask values must lie in [0, 1]")
        arr.setflags(write=False)
        self.values = arr

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def binarize(self, cutoff: float) -> BinaryMask2D:
        return BinaryMask2D(self.values >= cutoff)


@dataclass(frozen=True)
class VolumeGeometry:
    """Grid size and voxel spacing (mm). Arrays are indexed ``[z, y, x]``."""

    nx: int
    ny: int
    nz: int
    sx: float = 1.0
    sy: float = 1.0
    sz: float = 1.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise InvalidArgumentError("voxel counts must be >= 1")
        if min(self.sx, self.sy, self.sz) <= 0:
            raise InvalidArgumentError("voxel spacing must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def spacing_zyx(self) -> tuple[float, float, float]:
        return (self.sz, self.sy, self.sx)

    def to_dict(self) -> dict:
        return {"dims": [self.nx, self.ny, self.nz], "spacing_mm": [self.sx, self.sy, self.sz]}

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeGeometry":
        nx, ny, nz = (int(v) for v in d["dims"])
        sx, sy, sz = (float(v) for v in d["spacing_mm"])
        return cls(nx, ny, nz, sx, sy, sz)


def _check_same_shape(a: BinaryMask2D, b: BinaryMask2D) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def dice2d(a: BinaryMask2D, b: BinaryMask2D) -> float:
    """Dice overlap of two equally sized masks; 0 when both are empty."""
    _check_same_shape(a, b)
    total = a.area + b.area
    if total == 0:
        return 0.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / total


def union(a: BinaryMask2D, b: BinaryMask2D) -> BinaryMask2D:
    _check_same_shape(a, b)
    return BinaryMask2D(a.bits | b.bits)


def average_masks(masks: Sequence[BinaryMask2D]) -> SoftMask2D:
    if not masks:
        raise InvalidArgumentError("cannot average an empty list of masks")
    for m in masks[1:]:
        _check_same_shape(masks[0], m)
    stack = np.stack([m.bits for m in masks]).astype(float)
    return SoftMask2D(stack.mean(axis=0))


def average_binarize(masks: Sequence[BinaryMask2D], cutoff: float = 0.5) -> BinaryMask2D:
    """Pixel-wise mean of the masks, kept where the mean is >= ``cutoff``."""
    if not 0.0 < cutoff <= 1.0:
        raise InvalidArgumentError(f"cutoff must lie in (0, 1], got {cutoff}")
    if not masks:
        raise InvalidArgumentError("cannot average an empty list of masks")
    for m in masks[1:]:
        _check_same_shape(masks[0], m)
    votes = np.sum([m.bits for m in masks], axis=0, dtype=np.int64)
    return BinaryMask2D(votes / len(masks) >= cutoff)


def rle_encode(m: BinaryMask2D) -> str:
    """Alternating run lengths, row-major, starting with a (possibly empty) zero run."""
    flat = m.bits.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return ",".join(str(r) for r in runs)


def rle_decode(s: str, width: int, height: int) -> BinaryMask2D:
    if width < 1 or height < 1:
        raise InvalidArgumentError("width and height must be >= 1")
    text = s.strip()
    if not text:
        raise ParseError("empty run list")
    runs = []
    offset = 0
    for tok in text.split(","):
        tok_s = tok.strip()
        if not tok_s.isdigit():
            raise ParseError(f"invalid run length {tok!r}", "rle", offset)
        runs.append(int(tok_s))
        offset += len(tok) + 1
    total = sum(runs)
    if total != width * height:
        raise ParseError(f"runs sum to {total}, expected {width * height}", "rle")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2 == 1:
            flat[pos:pos + r] = True
        pos += r
    return BinaryMask2D(flat.reshape(height, width))
