"""3D evaluation metrics and lesion-level matching.

All volumes are boolean arrays indexed ``[z, y, x]`` on the original grid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .masks import VolumeGeometry

GRADE_GROUPS = ("1", "1+", "2", "2+", "3", "3+", "4", "5")
# "2+" sits above grade group 2: the 19 lesions reported as GGG > 2 are exactly 2+, 3, 3+ and 4
HIGH_GRADE = frozenset({"2+", "3", "3+", "4", "5"})


@dataclass(frozen=True)
class GroundTruthLesion:
    voxels: np.ndarray = field(repr=False)
    ggg: str = "2"
    lesion_id: str = ""

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=bool, copy=True)
        if vox.ndim != 3:
            raise InvalidArgumentError("lesion voxels must be a 3D array")
        if not vox.any():
            raise InvalidArgumentError("lesion voxel set is empty")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        if str(self.ggg) not in GRADE_GROUPS:
            raise InvalidArgumentError(f"unknown grade group {self.ggg!r}")
        object.__setattr__(self, "ggg", str(self.ggg))

    @property
    def high_grade(self) -> bool:
        return self.ggg in HIGH_GRADE

    @property
    def slices(self) -> list[int]:
        return [int(z) for z in np.flatnonzero(self.voxels.any(axis=(1, 2)))]


@dataclass
class LesionEvalRecord:
    lesion_id: str
    ggg: str
    detected: bool
    matched_prediction: int | None = None
    dsc: float | None = None
    hd95_mm: float | None = None
    tpr: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(gt, dtype=bool)
    b = np.asarray(pred, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"volume shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice3d(gt, pred) -> float:
    a, b = _pair(gt, pred)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def tpr3d(gt, pred) -> float:
    """Fraction of ground-truth voxels covered by the prediction."""
    a, b = _pair(gt, pred)
    n = int(a.sum())
    if n == 0:
        raise InvalidArgumentError("ground truth is empty")
    return int(np.count_nonzero(a & b)) / n


def nearest_rank(values: np.ndarray, q: float = 0.95) -> float:
    """Nearest-rank percentile: the ``ceil(q * n)``-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise InvalidArgumentError("no values")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


def hd95_mm(gt, pred, geom: VolumeGeometry | Sequence[float]) -> float:
    """Directed 95th-percentile distance (mm) from ground-truth to predicted voxels.

    For every ground-truth voxel centre the Euclidean distance to the closest
    predicted voxel centre is taken, using the anisotropic spacing.
    """
    a, b = _pair(gt, pred)
    if not a.any() or not b.any():
        raise InvalidArgumentError("hd95 needs two non-empty voxel sets")
    spacing = geom.spacing_zyx if isinstance(geom, VolumeGeometry) else tuple(float(s) for s in geom)
    if isinstance(geom, VolumeGeometry) and a.shape != geom.shape:
        raise InvalidArgumentError(f"volume shape {a.shape} does not match geometry {geom.shape}")
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return nearest_rank(dist[a], 0.95)


def match_lesions(
    gt_lesions: Sequence[GroundTruthLesion],
    preds: Sequence[np.ndarray],
    match_dsc: float = 0.15,
    geom: VolumeGeometry | None = None,
) -> list[LesionEvalRecord]:
    """Evaluate each lesion against its best-overlapping prediction.

    A lesion counts as detected when some prediction has DSC above
    ``match_dsc``; the highest-DSC prediction (lowest index on ties) is then
    scored. A prediction may be matched by several lesions.
    """
    records = []
    for i, lesion in enumerate(gt_lesions):
        lid = lesion.lesion_id or str(i)
        best, best_idx = -1.0, None
        for j, p in enumerate(preds):
            d = dice3d(lesion.voxels, p)
            if d > best:
                best, best_idx = d, j
        if best_idx is None or best <= match_dsc:
            records.append(LesionEvalRecord(lid, lesion.ggg, False))
            continue
        p = np.asarray(preds[best_idx], dtype=bool)
        spacing = geom if geom is not None else (1.0, 1.0, 1.0)
        records.append(LesionEvalRecord(
            lid, lesion.ggg, True, best_idx, best,
            hd95_mm(lesion.voxels, p, spacing), tpr3d(lesion.voxels, p),
        ))
    return records


def detection_rate(records: Sequence[LesionEvalRecord]) -> float:
    if not records:
        raise InvalidArgumentError("no lesion records")
    return sum(r.detected for r in records) / len(records)


def _mean_std(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def summarize(records: Sequence[LesionEvalRecord]) -> dict:
    """Detection rate plus mean/std of DSC, 95 HD and TPR over detected lesions."""
    detected = [r for r in records if r.detected]
    return {
        "lesions": len(records),
        "detected": len(detected),
        "detection_rate": detection_rate(records) if records else None,
        "dsc": _mean_std([r.dsc for r in detected]),
        "hd95_mm": _mean_std([r.hd95_mm for r in detected]),
        "tpr": _mean_std([r.tpr for r in detected]),
    }


def stratified_summary(records: Sequence[LesionEvalRecord]) -> dict:
    return {
        "all": summarize(records),
        "ggg_gt2": summarize([r for r in records if r.ggg in HIGH_GRADE]),
    }
