"""Self-training around an external detector.

One round: predict the unlabeled patients under the selected transforms,
ensemble the per-slice predictions (combination for S1, voting for S2),
aggregate to top-k 3D predictions, select pseudo-labels and emit a new
training manifest. Retraining is the caller's job: it supplies the detector
for the next round.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Mapping, Protocol, Sequence

import numpy as np

from .aggregate3d import AggregationParams, Prediction3D, aggregate
from .ensemble import IDENTITY, EnsembleConfig, TransformSpec, ensemble, predict_with_transform
from .errors import InvalidArgumentError, ValidationError
from .io import PredictionFile, read_lesions, read_volume, write_json, write_predictions
from .masks import ScoredMask2D, VolumeGeometry
from .metrics import dice3d

log = logging.getLogger(__name__)


class Detector(Protocol):
    """Anything that turns a ``(channels, nz, ny, nx)`` volume into per-slice predictions.

    Must be deterministic for a fixed model state. ``thread_safe`` declares
    whether concurrent ``predict`` calls are allowed.
    """

    thread_safe: bool

    def predict(self, volume: np.ndarray) -> list[list[ScoredMask2D]]: ...


@dataclass(frozen=True)
class SelectionStrategy:
    kind: Literal["S1", "S2"] = "S1"
    s1_reference_dsc: float = 0.5

    def __post_init__(self):
        if self.kind not in ("S1", "S2"):
            raise InvalidArgumentError(f"unknown strategy {self.kind!r}")
        if not 0.0 < self.s1_reference_dsc < 1.0:
            raise InvalidArgumentError("s1_reference_dsc must lie in (0, 1)")

    @property
    def ensemble_mode(self) -> str:
        return "combination" if self.kind == "S1" else "voting"


@dataclass(frozen=True)
class PseudoLabel:
    patient_id: str
    prediction: Prediction3D
    iteration: int
    provenance: str = "pseudo"


def distill_patient(detector, volume: np.ndarray, transforms: Sequence[TransformSpec],
                    strategy: SelectionStrategy, agg: AggregationParams,
                    cfg: EnsembleConfig | None = None) -> list[Prediction3D]:
    """Identity plus every transform -> ensemble per slice -> top-k 3D predictions."""
    cfg = replace(cfg or EnsembleConfig(), mode=strategy.ensemble_mode)
    sources = [IDENTITY] + [t for t in transforms if t.kind != "identity"]
    pred_sets = [predict_with_transform(detector, volume, t) for t in sources]
    return aggregate(ensemble(pred_sets, cfg), agg)


def distill_labels(
    detector,
    unlabeled: Mapping[str, np.ndarray],
    transforms: Sequence[TransformSpec],
    strategy: SelectionStrategy = SelectionStrategy(),
    agg: AggregationParams = AggregationParams(),
    cfg: EnsembleConfig | None = None,
    workers: int = 1,
) -> dict[str, list[Prediction3D]]:
    """Top-k candidate 3D predictions for every unlabeled patient.

    A detector failure skips that patient with a logged diagnostic. Patients
    run concurrently only when ``workers > 1`` and the detector declares
    itself thread-safe.
    """
    if not transforms:
        raise InvalidArgumentError("at least one transform besides the identity is required")

    def run(pid):
        try:
            return pid, distill_patient(detector, unlabeled[pid], transforms, strategy, agg, cfg)
        except Exception as exc:  # the detector is external code
            log.warning("patient %s skipped: detector failed: %s", pid, exc)
            return pid, None

    ids = sorted(unlabeled)
    if workers > 1 and getattr(detector, "thread_safe", False):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, ids))
    else:
        results = [run(pid) for pid in ids]
    return {pid: preds for pid, preds in results if preds is not None}


def select_s1(candidates: Mapping[str, Sequence[Prediction3D]], references: Mapping[str, Sequence[np.ndarray]],
              min_dsc: float = 0.5, iteration: int = 0) -> list[PseudoLabel]:
    """Keep candidates whose 3D DSC with some reference delineation exceeds ``min_dsc``.

    The label keeps the candidate's own boundary; the reference only gates it.
    """
    out = []
    for pid in sorted(candidates):
        refs = references.get(pid)
        if not refs:
            log.warning("patient %s excluded from S1: no reference delineation", pid)
            continue
        nz = refs[0].shape[0]
        for pred in candidates[pid]:
            vol = pred.to_volume(nz)
            if any(dice3d(ref, vol) > min_dsc for ref in refs):
                out.append(PseudoLabel(pid, pred, iteration))
    return out


def select_s2(candidates: Mapping[str, Sequence[Prediction3D]], iteration: int = 0) -> list[PseudoLabel]:
    """Keep every top-k candidate."""
    return [PseudoLabel(pid, pred, iteration) for pid in sorted(candidates) for pred in candidates[pid]]


# --- manifests ---------------------------------------------------------------

PROVENANCES = ("human", "pseudo", "none")
SPLITS = ("train", "val", "test", "unlabeled")


@dataclass
class ManifestEntry:
    id: str
    volume: str
    geometry: VolumeGeometry
    labels: list[str] = field(default_factory=list)
    label_provenance: str = "none"
    biopsy_proven: bool = False
    split: str = "train"
    iteration: int | None = None
    references: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.label_provenance not in PROVENANCES:
            raise ValidationError(f"{self.id}: unknown label provenance {self.label_provenance!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.id}: unknown split {self.split!r}")
        if self.label_provenance == "pseudo" and self.iteration is None:
            raise ValidationError(f"{self.id}: pseudo labels must carry their iteration")

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "volume": self.volume,
            "geometry": self.geometry.to_dict(),
            "labels": list(self.labels),
            "label_provenance": self.label_provenance,
            "biopsy_proven": self.biopsy_proven,
            "split": self.split,
        }
        if self.iteration is not None:
            d["iteration"] = self.iteration
        if self.references:
            d["references"] = list(self.references)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            id=str(d["id"]), volume=str(d["volume"]), geometry=VolumeGeometry.from_dict(d["geometry"]),
            labels=[str(x) for x in d.get("labels", [])], label_provenance=d.get("label_provenance", "none"),
            biopsy_proven=bool(d.get("biopsy_proven", False)), split=d.get("split", "train"),
            iteration=d.get("iteration"), references=[str(x) for x in d.get("references", [])],
        )


@dataclass
class TrainingManifest:
    entries: list[ManifestEntry]
    iteration: int = 0
    rng: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate patient identifiers in manifest")

    @property
    def human(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label_provenance == "human"]

    @property
    def unlabeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label_provenance != "human" and e.split in ("train", "unlabeled")]

    def to_dict(self) -> dict:
        d = {"iteration": self.iteration, "patients": [e.to_dict() for e in self.entries]}
        if self.rng:
            d["rng"] = self.rng
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingManifest":
        return cls([ManifestEntry.from_dict(e) for e in d["patients"]], int(d.get("iteration", 0)),
                   dict(d.get("rng", {})))


def _load_references(entry: ManifestEntry, root: Path) -> list[np.ndarray]:
    if not entry.biopsy_proven:
        return []
    refs = []
    for ref in entry.references:
        _, lesions, _ = read_lesions(root / ref)
        refs.extend(lesion.voxels for lesion in lesions)
    return refs


def selftrain_round(
    manifest: TrainingManifest,
    detector,
    strategy: SelectionStrategy,
    transforms: Sequence[TransformSpec],
    agg: AggregationParams = AggregationParams(),
    *,
    root: str | Path,
    out_dir: str | Path | None = None,
    cfg: EnsembleConfig | None = None,
    workers: int = 1,
) -> TrainingManifest:
    """Produce the next manifest: human entries untouched, pseudo labels regenerated.

    Paths in the manifest are relative to ``root``; pseudo-label prediction
    files are written under ``out_dir`` (default ``root``). If no candidate
    passes selection the manifest is returned unchanged apart from the
    iteration counter.
    """
    root = Path(root)
    out_dir = Path(out_dir) if out_dir is not None else root
    if not manifest.human or not manifest.unlabeled:
        raise ValidationError("manifest needs at least one human-labeled and one unlabeled entry")
    it = manifest.iteration + 1
    pool = manifest.unlabeled
    pool_ids = {e.id for e in pool}
    volumes = {}
    for e in pool:
        vol, geom = read_volume(root / e.volume)
        if geom.shape != e.geometry.shape:
            raise ValidationError(f"{e.id}: volume geometry {geom.shape} disagrees with manifest {e.geometry.shape}")
        volumes[e.id] = vol
    candidates = distill_labels(detector, volumes, transforms, strategy, agg, cfg, workers)
    if strategy.kind == "S1":
        refs = {e.id: _load_references(e, root) for e in pool}
        selected = select_s1(candidates, refs, strategy.s1_reference_dsc, it)
    else:
        selected = select_s2(candidates, it)
    if not selected:
        log.warning("iteration %d: no predictions met the selection criteria; manifest unchanged", it)
        return replace(manifest, entries=list(manifest.entries), iteration=it)

    by_patient: dict[str, list[PseudoLabel]] = {}
    for lab in selected:
        by_patient.setdefault(lab.patient_id, []).append(lab)
    new_entries = []
    for e in manifest.entries:
        if e.id not in pool_ids:
            new_entries.append(e)
            continue
        labs = by_patient.get(e.id)
        if not labs:
            new_entries.append(replace(e, labels=[], label_provenance="none", iteration=None))
            continue
        rel = Path(f"pseudo_it{it}") / f"{e.id}.json"
        pf = PredictionFile(
            e.id, e.geometry.nx, e.geometry.ny, "original",
            predictions3d=[lab.prediction for lab in labs],
            params={"aggregation": agg.to_dict(), "strategy": strategy.kind, "iteration": it,
                    "transforms": [str(t) for t in transforms], "provenance": "pseudo"},
            geometry=e.geometry,
        )
        write_predictions(out_dir / rel, pf)
        label_path = os.path.relpath(out_dir / rel, root)
        new_entries.append(replace(e, labels=[label_path], label_provenance="pseudo", iteration=it))
    return TrainingManifest(new_entries, it, dict(manifest.rng))


def run_selftrain(
    manifest: TrainingManifest,
    detector_factory: Callable[[TrainingManifest, int], object],
    strategy: SelectionStrategy,
    transforms: Sequence[TransformSpec],
    agg: AggregationParams = AggregationParams(),
    iterations: int = 3,
    *,
    root: str | Path,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> list[TrainingManifest]:
    """Iterate :func:`selftrain_round`; returns the manifest after every round.

    ``detector_factory(manifest, round_index)`` stands in for retraining and
    must return the detector to use for that round.
    """
    snapshots = []
    current = manifest
    for r in range(iterations):
        detector = detector_factory(current, r)
        current = selftrain_round(current, detector, strategy, transforms, agg,
                                  root=root, out_dir=out_dir, workers=workers)
        snapshots.append(current)
        write_json(Path(out_dir or root) / f"manifest_it{current.iteration}.json", current.to_dict())
    return snapshots
