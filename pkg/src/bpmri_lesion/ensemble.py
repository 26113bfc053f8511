"""Test-time transform ensembling of per-slice predictions.

Predictions from the original and transformed inputs are mapped back to the
original frame, grouped by overlap and either combined (everything kept) or
voted (majority of sources plus a score cut-off).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .aggregate3d import AggregationParams, aggregate, group_by_slice
from .errors import InvalidArgumentError
from .masks import BinaryMask2D, ScoredMask2D, average_binarize, dice2d

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformSpec:
    kind: Literal["identity", "fliplr", "flipud", "rotate"]
    angle_deg: float | None = None

    def __post_init__(self):
        if self.kind == "rotate":
            if self.angle_deg is None or not 0.0 < float(self.angle_deg) < 360.0:
                raise InvalidArgumentError(f"rotation angle must lie in (0, 360), got {self.angle_deg}")
            object.__setattr__(self, "angle_deg", float(self.angle_deg))
        elif self.kind in ("identity", "fliplr", "flipud"):
            if self.angle_deg is not None:
                raise InvalidArgumentError(f"{self.kind} takes no angle")
        else:
            raise InvalidArgumentError(f"unknown transform kind {self.kind!r}")

    def inverse(self) -> "TransformSpec":
        if self.kind == "rotate":
            return TransformSpec("rotate", 360.0 - self.angle_deg)
        return self

    def __str__(self) -> str:
        if self.kind == "rotate":
            return f"rot:{self.angle_deg:g}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        text = text.strip()
        if text.startswith("rot:"):
            return cls("rotate", float(text[4:]))
        return cls(text)


IDENTITY = TransformSpec("identity")


def parse_transforms(text: str) -> list[TransformSpec]:
    return [TransformSpec.parse(t) for t in text.split(",") if t.strip()]


def _rotate(arr: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    h, w = arr.shape
    quarter = angle_deg / 90.0
    if h == w and quarter == int(quarter):
        return np.rot90(arr, int(quarter) % 4).copy()
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    u, v = xx - cx, yy - cy
    # inverse map: output pixel samples the input at R(theta) @ (u, v)
    src_x = cx + c * u - s * v
    src_y = cy + s * u + c * v
    if nearest:
        ix = np.rint(src_x).astype(int)
        iy = np.rint(src_y).astype(int)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros_like(arr)
        out[ok] = arr[iy[ok], ix[ok]]
        return out
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx, fy = src_x - x0, src_y - y0
    out = np.zeros((h, w), dtype=float)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            out[ok] += (wy * wx)[ok] * arr[yi[ok], xi[ok]]
    return out


def apply_transform(arr, t: TransformSpec):
    """Apply ``t`` to an image (bilinear) or a mask (nearest neighbour).

    Accepts a :class:`BinaryMask2D`, a boolean array (treated as a mask) or a
    float array. Rotation is about the array centre with zero fill.
    """
    if isinstance(arr, BinaryMask2D):
        return BinaryMask2D(apply_transform(arr.bits, t))
    a = np.asarray(arr)
    if a.ndim != 2:
        raise InvalidArgumentError("apply_transform expects a 2D array")
    if t.kind == "identity":
        return a.copy()
    if t.kind == "fliplr":
        return a[:, ::-1].copy()
    if t.kind == "flipud":
        return a[::-1, :].copy()
    return _rotate(a, t.angle_deg, nearest=a.dtype == bool)


def apply_transform_volume(volume: np.ndarray, t: TransformSpec) -> np.ndarray:
    """Transform every 2D plane of an array whose last two axes are ``(y, x)``."""
    vol = np.asarray(volume)
    if t.kind == "identity":
        return vol.copy()
    flat = vol.reshape((-1,) + vol.shape[-2:])
    out = np.stack([apply_transform(p, t) for p in flat])
    return out.reshape(vol.shape)


def invert_prediction(pred: ScoredMask2D, t: TransformSpec) -> ScoredMask2D | None:
    """Map a prediction made on transformed input back to the original frame.

    Returns ``None`` when resampling leaves no pixels (tiny masks near the
    border under rotation).
    """
    mask = apply_transform(pred.mask.bits, t.inverse())
    if not mask.any():
        return None
    return ScoredMask2D(BinaryMask2D(mask), pred.score, pred.slice_index, pred.member_scores)


@dataclass(frozen=True)
class EnsembleConfig:
    agree_dsc: float = 0.7
    binarize_cutoff: float = 0.5
    vote_score_cutoff: float = 0.85
    mode: Literal["combination", "voting"] = "combination"

    def __post_init__(self):
        for name in ("agree_dsc", "binarize_cutoff", "vote_score_cutoff"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in (0, 1], got {v}")
        if self.mode not in ("combination", "voting"):
            raise InvalidArgumentError(f"unknown ensemble mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "agree_dsc": self.agree_dsc,
            "binarize_cutoff": self.binarize_cutoff,
            "vote_score_cutoff": self.vote_score_cutoff,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class AgreementGroup:
    """Predictions from distinct sources that agree with a common seed."""

    slice_index: int
    members: tuple[tuple[int, ScoredMask2D], ...]  # (source index, prediction); seed first

    @property
    def sources(self) -> set[int]:
        return {s for s, _ in self.members}

    @property
    def mean_score(self) -> float:
        return sum(p.score for _, p in self.members) / len(self.members)


def agreement_groups(pred_sets: Sequence[Sequence[ScoredMask2D]], agree_dsc: float) -> list[AgreementGroup]:
    """Seed-centric grouping, one member per source.

    Seeds are taken in descending score order (ties: source, then position).
    A seed claims, from every other source, the unassigned prediction with the
    highest DSC against it provided that DSC exceeds ``agree_dsc``.
    """
    flat = [(src, pos, p) for src, preds in enumerate(pred_sets) for pos, p in enumerate(preds)]
    if flat:
        shape = flat[0][2].mask.shape
        if any(p.mask.shape != shape for _, _, p in flat):
            raise InvalidArgumentError("all masks must share dimensions")
    by_slice: dict[int, list[tuple[int, int, ScoredMask2D]]] = {}
    for item in flat:
        by_slice.setdefault(item[2].slice_index, []).append(item)
    groups = []
    for k in sorted(by_slice):
        items = sorted(by_slice[k], key=lambda it: (-it[2].score, it[0], it[1]))
        assigned: set[tuple[int, int]] = set()
        for src, pos, seed in items:
            if (src, pos) in assigned:
                continue
            assigned.add((src, pos))
            members = [(src, seed)]
            best: dict[int, tuple[float, int, ScoredMask2D]] = {}
            for osrc, opos, other in items:
                if osrc == src or (osrc, opos) in assigned:
                    continue
                d = dice2d(seed.mask, other.mask)
                if d <= agree_dsc:
                    continue
                cur = best.get(osrc)
                if cur is None or d > cur[0] or (d == cur[0] and opos < cur[1]):
                    best[osrc] = (d, opos, other)
            for osrc in sorted(best):
                _, opos, other = best[osrc]
                assigned.add((osrc, opos))
                members.append((osrc, other))
            groups.append(AgreementGroup(k, tuple(members)))
    return groups


def _fuse(group: AgreementGroup, cutoff: float) -> ScoredMask2D | None:
    mask = average_binarize([p.mask for _, p in group.members], cutoff)
    if mask.is_empty():
        return None
    return ScoredMask2D(mask, group.mean_score, group.slice_index)


def combine2d(pred_sets: Sequence[Sequence[ScoredMask2D]], cfg: EnsembleConfig = EnsembleConfig()) -> list[ScoredMask2D]:
    """Keep every prediction; agreeing ones are averaged into one mask and score."""
    if len(pred_sets) < 1:
        raise InvalidArgumentError("need at least one prediction source")
    if len(pred_sets) == 1:
        return list(pred_sets[0])
    out = []
    for g in agreement_groups(pred_sets, cfg.agree_dsc):
        if len(g.members) == 1:
            out.append(g.members[0][1])
            continue
        fused = _fuse(g, cfg.binarize_cutoff)
        # an empty average can only arise from a weakly overlapping chain; fall back to the seed mask
        out.append(fused if fused is not None else ScoredMask2D(g.members[0][1].mask, g.mean_score, g.slice_index))
    return out


def vote2d(pred_sets: Sequence[Sequence[ScoredMask2D]], cfg: EnsembleConfig = EnsembleConfig()) -> list[ScoredMask2D]:
    """Keep groups backed by more than half of the sources whose mean score passes the cut-off."""
    n = len(pred_sets)
    if n < 2:
        raise InvalidArgumentError("voting needs at least two prediction sources")
    out = []
    for g in agreement_groups(pred_sets, cfg.agree_dsc):
        if 2 * len(g.members) <= n:
            continue
        if g.mean_score < cfg.vote_score_cutoff:
            continue
        fused = _fuse(g, cfg.binarize_cutoff)
        if fused is not None:
            out.append(fused)
    return out


def ensemble(pred_sets: Sequence[Sequence[ScoredMask2D]], cfg: EnsembleConfig = EnsembleConfig()) -> list[ScoredMask2D]:
    if cfg.mode == "voting":
        return vote2d(pred_sets, cfg)
    return combine2d(pred_sets, cfg)


def predict_with_transform(detector, volume: np.ndarray, t: TransformSpec) -> list[ScoredMask2D]:
    """Run ``detector`` on the transformed volume and map its masks back."""
    raw = detector.predict(apply_transform_volume(volume, t))
    out = []
    for slice_preds in raw:
        for p in slice_preds:
            inv = invert_prediction(p, t)
            if inv is not None:
                out.append(inv)
    return out


def _evaluate_transform(detector, validation, t: TransformSpec, agg: AggregationParams,
                        match_dsc: float) -> tuple[float, float]:
    from .metrics import match_lesions  # local import: metrics depends on aggregate3d only

    records = []
    for patient in validation:
        preds = aggregate(predict_with_transform(detector, patient.volume, t), agg)
        nz = patient.volume.shape[-3]
        vols = [p.to_volume(nz) for p in preds]
        records.extend(match_lesions(patient.lesions, vols, match_dsc, patient.geometry))
    if not records:
        return 0.0, 0.0
    detected = [r for r in records if r.detected]
    rate = len(detected) / len(records)
    mean_dsc = float(np.mean([r.dsc for r in detected])) if detected else 0.0
    return rate, mean_dsc


def select_transforms(
    detector,
    validation: Sequence,
    rotation_step_deg: float = 5.0,
    agg: AggregationParams = AggregationParams(),
    match_dsc: float = 0.15,
    n_rotations: int = 2,
    progress: Callable[[TransformSpec, tuple[float, float]], None] | None = None,
) -> list[TransformSpec]:
    """Choose the test-time transforms worth ensembling.

    Each candidate is scored on its own by (detection rate, mean DSC of
    detected lesions) over the validation patients, which must expose
    ``volume``, ``lesions`` and ``geometry``. Flips are kept only if they beat
    the identity; the ``n_rotations`` best distinct angles from
    ``step, 2*step, ... < 360`` are always returned (ties: smaller angle).
    """
    if not validation:
        raise InvalidArgumentError("validation set is empty")
    if not 0.0 < rotation_step_deg < 360.0:
        raise InvalidArgumentError("rotation step must lie in (0, 360)")

    def score(t):
        s = _evaluate_transform(detector, validation, t, agg, match_dsc)
        if progress is not None:
            progress(t, s)
        log.debug("transform %s -> rate %.3f dsc %.3f", t, *s)
        return s

    base = score(IDENTITY)
    chosen = [t for t in (TransformSpec("fliplr"), TransformSpec("flipud")) if score(t) > base]
    n_steps = int(np.ceil(360.0 / rotation_step_deg - 1e-9))
    angles = [round(i * rotation_step_deg, 9) for i in range(1, n_steps)]
    angles = [a for a in angles if a < 360.0]
    scored = [(score(TransformSpec("rotate", a)), a) for a in angles]
    scored.sort(key=lambda sa: (-sa[0][0], -sa[0][1], sa[1]))
    chosen.extend(TransformSpec("rotate", a) for _, a in scored[:n_rotations])
    return chosen
