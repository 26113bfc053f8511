"""Aggregation of per-slice predictions into scored 3D predictions.

Four steps: discard low-score masks (beta), merge strongly overlapping masks
within a slice (gamma), link masks on adjacent slices (alpha), then keep the
``top_k`` highest-scoring 3D predictions.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .masks import BinaryMask2D, ScoredMask2D, dice2d


@dataclass(frozen=True)
class AggregationParams:
    alpha: float = 0.35
    beta: float = 0.7
    gamma: float = 0.7
    top_k: int = 5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")
        if self.top_k < 1:
            raise InvalidArgumentError("top_k must be >= 1")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "top_k": self.top_k}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AggregationParams":
        return cls(float(d["alpha"]), float(d["beta"]), float(d["gamma"]), int(d["top_k"]))


@dataclass(frozen=True)
class Prediction3D:
    """Masks on consecutive slices linked into one lesion candidate.

    The score is the maximum of the member (post-merge) scores.
    """

    members: tuple[ScoredMask2D, ...]
    score: float = field(init=False)

    def __post_init__(self):
        members = tuple(sorted(self.members, key=lambda m: m.slice_index))
        if not members:
            raise InvalidArgumentError("a 3D prediction needs at least one member")
        idx = [m.slice_index for m in members]
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise InvalidArgumentError(f"member slices must be consecutive, got {idx}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "score", max(m.score for m in members))

    @property
    def slices(self) -> list[int]:
        return [m.slice_index for m in self.members]

    @property
    def voxel_count(self) -> int:
        return sum(m.mask.area for m in self.members)

    @property
    def plane_shape(self) -> tuple[int, int]:
        return self.members[0].mask.shape

    def to_volume(self, nz: int) -> np.ndarray:
        h, w = self.plane_shape
        vol = np.zeros((nz, h, w), dtype=bool)
        for m in self.members:
            if m.slice_index >= nz:
                raise InvalidArgumentError(f"slice {m.slice_index} outside volume of depth {nz}")
            vol[m.slice_index] = m.mask.bits
        return vol


def filter_by_score(preds: Iterable[ScoredMask2D], beta: float) -> list[ScoredMask2D]:
    """Discard masks scoring strictly below ``beta``."""
    return [p for p in preds if p.score >= beta]


def merge_in_slice(preds: Sequence[ScoredMask2D], gamma: float) -> list[ScoredMask2D]:
    """Greedily union the highest-DSC pair while any pair exceeds ``gamma``.

    A merged mask's score is the mean of all original member scores, so the
    result does not depend on the pairing history. Ties between equal-DSC
    pairs go to the lowest ``(i, j)`` index pair; the merged cluster takes the
    position of ``i``.
    """
    if not preds:
        return []
    slice_index = preds[0].slice_index
    if any(p.slice_index != slice_index for p in preds):
        raise InvalidArgumentError("merge_in_slice expects masks from a single slice")
    clusters: list[tuple[BinaryMask2D, tuple[float, ...]]] = [(p.mask, p.sources) for p in preds]
    originals = list(preds)
    while len(clusters) > 1:
        best, best_pair = -1.0, None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = dice2d(clusters[i][0], clusters[j][0])
                if d > best:
                    best, best_pair = d, (i, j)
        if best <= gamma:
            break
        i, j = best_pair
        mask = BinaryMask2D(clusters[i][0].bits | clusters[j][0].bits)
        clusters[i] = (mask, clusters[i][1] + clusters[j][1])
        originals[i] = None
        del clusters[j]
        del originals[j]
    out = []
    for (mask, scores), orig in zip(clusters, originals):
        if orig is not None:
            out.append(orig)
        else:
            out.append(ScoredMask2D(mask, sum(scores) / len(scores), slice_index, scores))
    return out


def group_by_slice(preds: Iterable[ScoredMask2D]) -> dict[int, list[ScoredMask2D]]:
    grouped: dict[int, list[ScoredMask2D]] = defaultdict(list)
    for p in preds:
        grouped[p.slice_index].append(p)
    return dict(grouped)


def link_across_slices(per_slice: Mapping[int, Sequence[ScoredMask2D]], alpha: float) -> list[Prediction3D]:
    """Link masks on adjacent slices whose DSC exceeds ``alpha``.

    Slices are visited in ascending order. Every (open prediction, new mask)
    pair above ``alpha`` is ranked by DSC, then the prediction's running max
    score, then prediction creation order, then mask order, and assigned
    greedily one-to-one. Unmatched masks open new predictions.
    """
    chains: list[list[ScoredMask2D]] = []
    chain_score: list[float] = []
    open_ids: list[int] = []
    prev_slice = None
    for k in sorted(per_slice):
        masks = list(per_slice[k])
        if prev_slice is None or k != prev_slice + 1:
            open_ids = []
        candidates = []
        for ci in open_ids:
            last = chains[ci][-1]
            for mi, m in enumerate(masks):
                d = dice2d(last.mask, m.mask)
                if d > alpha:
                    candidates.append((-d, -chain_score[ci], ci, mi))
        candidates.sort()
        taken_chain, taken_mask = set(), set()
        now_open = []
        for _, _, ci, mi in candidates:
            if ci in taken_chain or mi in taken_mask:
                continue
            taken_chain.add(ci)
            taken_mask.add(mi)
            chains[ci].append(masks[mi])
            chain_score[ci] = max(chain_score[ci], masks[mi].score)
            now_open.append(ci)
        for mi, m in enumerate(masks):
            if mi not in taken_mask:
                chains.append([m])
                chain_score.append(m.score)
                now_open.append(len(chains) - 1)
        open_ids = sorted(now_open)
        prev_slice = k
    return [Prediction3D(tuple(c)) for c in chains]


def _rank_key(p: Prediction3D):
    return (
        -p.score,
        -p.voxel_count,
        p.slices[0],
        tuple((m.slice_index, m.mask.bits.tobytes()) for m in p.members),
    )


def top_k(preds: Iterable[Prediction3D], k: int = 5) -> list[Prediction3D]:
    """Highest scores first; ties by larger volume, lower first slice, then mask bytes."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    return sorted(preds, key=_rank_key)[:k]


def aggregate(preds: Iterable[ScoredMask2D], params: AggregationParams = AggregationParams()) -> list[Prediction3D]:
    """Full 2D -> 3D aggregation: filter, merge, link, select."""
    preds = list(preds)
    if preds:
        shape = preds[0].mask.shape
        if any(p.mask.shape != shape for p in preds):
            raise InvalidArgumentError("all masks must share dimensions")
    kept = filter_by_score(preds, params.beta)
    merged = {k: merge_in_slice(v, params.gamma) for k, v in group_by_slice(kept).items()}
    return top_k(link_across_slices(merged, params.alpha), params.top_k)
