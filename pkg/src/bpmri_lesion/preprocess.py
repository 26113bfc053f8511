"""Image conditioning and the geometric map between volume and patch space.

Pipeline order is fixed: z-normalization, then histogram equalization, then
crop around the gland (1 px margin) and aspect-preserving resize/pad to a
square ``target`` patch. :func:`mask_to_original` undoes the geometry so that
metrics are always computed on the original grid.

Images are plain float arrays of shape ``(height, width)`` (or any shape for
the intensity operations); masks are :class:`~bpmri_lesion.masks.BinaryMask2D`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgumentError
from .masks import BinaryMask2D, VolumeGeometry
from .resample import resize_bilinear, resize_nearest

STD_FLOOR = 1e-12


def _as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("image contains non-finite values")
    return arr


def znorm(img) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation.

    A constant image maps to all zeros.
    """
    arr = _as_image(img)
    std = arr.std()
    if std < STD_FLOOR:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / std


def hist_equalize(img, bins: int = 256) -> np.ndarray:
    """Remap intensities through their empirical CDF over ``bins`` equal bins.

    Output lies in [0, 1]; the mapping is monotone non-decreasing. A value in
    bin ``k`` maps to the fraction of pixels in bins ``0..k``.
    """
    if bins < 2:
        raise InvalidArgumentError("bins must be >= 2")
    arr = _as_image(img)
    if arr.size == 0:
        return arr.copy()
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0:
        return np.ones_like(arr)
    idx = np.floor((arr - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / arr.size
    return cdf[idx]


@dataclass(frozen=True)
class CropBox:
    """Inclusive-exclusive pixel box ``[x0, x0 + w) x [y0, y0 + h)`` in the original grid."""

    x0: int
    y0: int
    w: int
    h: int


@dataclass(frozen=True)
class PatchTransform:
    """Forward map original grid -> square patch: crop, scale, then pad."""

    crop_x0: int
    crop_y0: int
    crop_w: int
    crop_h: int
    scale: float
    pad_left: int
    pad_top: int
    target: int = 256

    @property
    def scaled_w(self) -> int:
        return min(self.target, max(1, int(round(self.crop_w * self.scale))))

    @property
    def scaled_h(self) -> int:
        return min(self.target, max(1, int(round(self.crop_h * self.scale))))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchTransform":
        return cls(
            crop_x0=int(d["crop_x0"]), crop_y0=int(d["crop_y0"]),
            crop_w=int(d["crop_w"]), crop_h=int(d["crop_h"]),
            scale=float(d["scale"]), pad_left=int(d["pad_left"]),
            pad_top=int(d["pad_top"]), target=int(d.get("target", 256)),
        )


def crop_box_for(organ_mask: BinaryMask2D, margin: int = 1) -> CropBox:
    if margin < 0:
        raise InvalidArgumentError("margin must be >= 0")
    if organ_mask.is_empty():
        raise InvalidArgumentError("organ mask is empty")
    ys, xs = np.nonzero(organ_mask.bits)
    x0 = max(int(xs.min()) - margin, 0)
    y0 = max(int(ys.min()) - margin, 0)
    x1 = min(int(xs.max()) + margin, organ_mask.width - 1)
    y1 = min(int(ys.max()) + margin, organ_mask.height - 1)
    return CropBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def crop_patch(img, organ_mask: BinaryMask2D, margin: int = 1) -> tuple[np.ndarray, CropBox]:
    """Crop the organ bounding box grown by ``margin`` (clamped to the image)."""
    arr = _as_image(img)
    if arr.shape[:2] != organ_mask.shape:
        raise InvalidArgumentError(f"image {arr.shape[:2]} and mask {organ_mask.shape} differ")
    box = crop_box_for(organ_mask, margin)
    return arr[box.y0:box.y0 + box.h, box.x0:box.x0 + box.w].copy(), box


def patch_transform_for(box: CropBox, target: int) -> PatchTransform:
    scale = target / max(box.w, box.h)
    t = PatchTransform(box.x0, box.y0, box.w, box.h, scale, 0, 0, target)
    pad_left = (target - t.scaled_w) // 2
    pad_top = (target - t.scaled_h) // 2
    return PatchTransform(box.x0, box.y0, box.w, box.h, scale, pad_left, pad_top, target)


def resize_pad(patch, target: int = 256, box: CropBox | None = None) -> tuple[np.ndarray, PatchTransform]:
    """Scale the longer side to ``target`` (bilinear) and zero-pad the shorter one.

    Odd padding puts the extra pixel on the right/bottom.
    """
    if target < 2:
        raise InvalidArgumentError("target must be >= 2")
    arr = _as_image(patch)
    h, w = arr.shape[:2]
    if box is None:
        box = CropBox(0, 0, w, h)
    elif (box.h, box.w) != (h, w):
        raise InvalidArgumentError("crop box does not match patch size")
    t = patch_transform_for(box, target)
    out = np.zeros((target, target) + arr.shape[2:])
    out[t.pad_top:t.pad_top + t.scaled_h, t.pad_left:t.pad_left + t.scaled_w] = resize_bilinear(
        arr, t.scaled_h, t.scaled_w
    )
    return out, t


def mask_to_patch(m: BinaryMask2D, t: PatchTransform) -> BinaryMask2D:
    """Forward-map an original-grid mask into patch space (nearest neighbour)."""
    crop = m.bits[t.crop_y0:t.crop_y0 + t.crop_h, t.crop_x0:t.crop_x0 + t.crop_w]
    if crop.shape != (t.crop_h, t.crop_w):
        raise InvalidArgumentError("crop box exceeds mask bounds")
    out = np.zeros((t.target, t.target), dtype=bool)
    out[t.pad_top:t.pad_top + t.scaled_h, t.pad_left:t.pad_left + t.scaled_w] = resize_nearest(
        crop, t.scaled_h, t.scaled_w
    )
    return BinaryMask2D(out)


def mask_to_original(m: BinaryMask2D, t: PatchTransform, geom: VolumeGeometry) -> BinaryMask2D:
    """Strip padding, undo the scale (nearest neighbour) and place at the crop offset."""
    if m.shape != (t.target, t.target):
        raise InvalidArgumentError(f"mask is {m.shape}, transform expects {t.target}x{t.target}")
    if t.crop_x0 < 0 or t.crop_y0 < 0 or t.crop_x0 + t.crop_w > geom.nx or t.crop_y0 + t.crop_h > geom.ny:
        raise InvalidArgumentError("crop box lies outside the volume geometry")
    if t.pad_left + t.scaled_w > t.target or t.pad_top + t.scaled_h > t.target:
        raise InvalidArgumentError("padding inconsistent with target size")
    inner = m.bits[t.pad_top:t.pad_top + t.scaled_h, t.pad_left:t.pad_left + t.scaled_w]
    out = np.zeros((geom.ny, geom.nx), dtype=bool)
    out[t.crop_y0:t.crop_y0 + t.crop_h, t.crop_x0:t.crop_x0 + t.crop_w] = resize_nearest(
        inner, t.crop_h, t.crop_w
    )
    return BinaryMask2D(out)


def preprocess_volume(volume, gland: np.ndarray, target: int = 256, margin: int = 1, bins: int = 256):
    """Condition a ``(channels, nz, ny, nx)`` volume into ``(channels, nz, target, target)`` patches.

    Each channel is normalized and equalized over the whole volume. The crop
    box is taken from the gland's in-plane footprint across all slices so every
    slice shares one :class:`PatchTransform`.
    """
    vol = _as_image(volume)
    if vol.ndim != 4:
        raise InvalidArgumentError("volume must be (channels, nz, ny, nx)")
    footprint = BinaryMask2D(np.asarray(gland, dtype=bool).any(axis=0))
    box = crop_box_for(footprint, margin)
    out = np.zeros((vol.shape[0], vol.shape[1], target, target))
    t = None
    for c in range(vol.shape[0]):
        chan = hist_equalize(znorm(vol[c]), bins)
        for z in range(vol.shape[1]):
            crop = chan[z, box.y0:box.y0 + box.h, box.x0:box.x0 + box.w]
            out[c, z], t = resize_pad(crop, target, box)
    return out, t
