"""File formats: raw volumes with JSON sidecars, prediction files, lesion files, reports.

Every write goes to a temporary file in the destination directory and is then
renamed into place, so readers never observe a partial file.
"""
from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .aggregate3d import AggregationParams, Prediction3D
from .errors import ParseError, ValidationError
from .masks import BinaryMask2D, ScoredMask2D, VolumeGeometry, rle_decode, rle_encode
from .metrics import GroundTruthLesion, LesionEvalRecord
from .preprocess import PatchTransform

TOOL = "bpmri-lesion"
DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
LAYOUT = "row-major, x fastest"


def provenance(params: dict | None = None) -> dict:
    return {"tool": TOOL, "version": __version__, "params": params or {}}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, str(path), exc.pos) from exc


# --- volumes ---------------------------------------------------------------

def _sidecar_path(raw: Path) -> Path:
    return raw.with_suffix(".json")


def write_volume(path: str | os.PathLike, data: np.ndarray, geom: VolumeGeometry) -> None:
    """Write ``data`` shaped ``(nz, ny, nx)`` or ``(channels, nz, ny, nx)``.

    Booleans are stored as uint8 {0, 1}; everything else as float32.
    """
    raw = Path(path)
    arr = np.asarray(data)
    channels = 1 if arr.ndim == 3 else arr.shape[0]
    if arr.shape[-3:] != geom.shape:
        raise ValidationError(f"array shape {arr.shape} does not match geometry {geom.shape}")
    dtype = "uint8" if arr.dtype == bool else "float32"
    payload = np.ascontiguousarray(arr.astype(DTYPES[dtype])).tobytes()
    sidecar = {
        **geom.to_dict(),
        "dtype": dtype,
        "layout": LAYOUT,
        "channels": channels,
        "provenance": provenance(),
    }
    atomic_write_bytes(raw, payload)
    write_json(_sidecar_path(raw), sidecar)


def read_volume(path: str | os.PathLike) -> tuple[np.ndarray, VolumeGeometry]:
    raw = Path(path)
    meta = read_json(_sidecar_path(raw))
    try:
        geom = VolumeGeometry.from_dict(meta)
        dtype = DTYPES[meta["dtype"]]
        channels = int(meta.get("channels", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad sidecar: {exc}", str(_sidecar_path(raw))) from exc
    expected = geom.nx * geom.ny * geom.nz * channels * dtype.itemsize
    actual = raw.stat().st_size
    if actual != expected:
        raise ParseError(f"payload is {actual} bytes, sidecar implies {expected}", str(raw))
    arr = np.fromfile(raw, dtype=dtype)
    shape = geom.shape if channels == 1 else (channels,) + geom.shape
    arr = arr.reshape(shape)
    if meta["dtype"] == "uint8":
        if np.any(arr > 1):
            raise ParseError("mask payload contains values other than 0/1", str(raw))
        arr = arr.astype(bool)
    return arr, geom


# --- predictions -----------------------------------------------------------

def _mask_entry(p: ScoredMask2D) -> dict:
    d = {"rle": rle_encode(p.mask), "score": p.score}
    if p.member_scores is not None:
        d["member_scores"] = list(p.member_scores)
    return d


def _mask_from(entry: dict, slice_index: int, width: int, height: int) -> ScoredMask2D:
    ms = entry.get("member_scores")
    return ScoredMask2D(rle_decode(entry["rle"], width, height), float(entry["score"]), slice_index,
                        tuple(ms) if ms is not None else None)


@dataclass
class PredictionFile:
    patient_id: str
    width: int
    height: int
    space: str = "original"
    slices: list[ScoredMask2D] = field(default_factory=list)
    predictions3d: list[Prediction3D] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    geometry: VolumeGeometry | None = None
    transform: PatchTransform | None = None

    def to_dict(self) -> dict:
        by_slice: dict[int, list[dict]] = {}
        for p in self.slices:
            by_slice.setdefault(p.slice_index, []).append(_mask_entry(p))
        d = {
            "patient_id": self.patient_id,
            "space": self.space,
            "width": self.width,
            "height": self.height,
            "slices": [{"slice_index": k, "masks": by_slice[k]} for k in sorted(by_slice)],
            "predictions3d": [
                {"score": p.score,
                 "members": [{"slice_index": m.slice_index, **_mask_entry(m)} for m in p.members]}
                for p in self.predictions3d
            ],
            "params": self.params,
            "provenance": provenance(self.params),
        }
        if self.geometry is not None:
            d["geometry"] = self.geometry.to_dict()
        if self.transform is not None:
            d["transform"] = self.transform.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, source: str = "<prediction>") -> "PredictionFile":
        try:
            w, h = int(d["width"]), int(d["height"])
            space = d.get("space", "original")
            if space not in ("patch", "original"):
                raise ParseError(f"unknown space {space!r}", source)
            slices = [
                _mask_from(m, int(s["slice_index"]), w, h)
                for s in d.get("slices", []) for m in s["masks"]
            ]
            preds3d = [
                Prediction3D(tuple(_mask_from(m, int(m["slice_index"]), w, h) for m in p["members"]))
                for p in d.get("predictions3d", [])
            ]
            for raw, p in zip(d.get("predictions3d", []), preds3d):
                if abs(float(raw["score"]) - p.score) > 1e-12:
                    raise ParseError("3D score is not the maximum member score", source)
            geom = VolumeGeometry.from_dict(d["geometry"]) if "geometry" in d else None
            transform = PatchTransform.from_dict(d["transform"]) if "transform" in d else None
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed prediction file: {exc}", source) from exc
        return cls(str(d["patient_id"]), w, h, space, slices, preds3d, dict(d.get("params", {})), geom, transform)

    def per_slice(self, nz: int | None = None) -> list[list[ScoredMask2D]]:
        depth = nz if nz is not None else (max((p.slice_index for p in self.slices), default=-1) + 1)
        out: list[list[ScoredMask2D]] = [[] for _ in range(depth)]
        for p in self.slices:
            out[p.slice_index].append(p)
        return out


def write_predictions(path: str | os.PathLike, pf: PredictionFile) -> None:
    write_json(path, pf.to_dict())


def read_predictions(path: str | os.PathLike) -> PredictionFile:
    return PredictionFile.from_dict(read_json(path), str(path))


def aggregation_params_of(pf: PredictionFile) -> AggregationParams | None:
    agg = pf.params.get("aggregation")
    return AggregationParams.from_dict(agg) if agg else None


# --- ground-truth lesions --------------------------------------------------

def write_lesions(path: str | os.PathLike, patient_id: str, lesions: list[GroundTruthLesion],
                  geom: VolumeGeometry) -> None:
    entries = []
    for i, lesion in enumerate(lesions):
        entries.append({
            "id": lesion.lesion_id or str(i),
            "ggg": lesion.ggg,
            "slices": [{"slice_index": z, "rle": rle_encode_array(lesion.voxels[z])} for z in lesion.slices],
        })
    write_json(path, {"patient_id": patient_id, "geometry": geom.to_dict(), "lesions": entries,
                      "provenance": provenance()})


def rle_encode_array(arr: np.ndarray) -> str:
    return rle_encode(BinaryMask2D(arr))


def read_lesions(path: str | os.PathLike) -> tuple[str, list[GroundTruthLesion], VolumeGeometry]:
    d = read_json(path)
    try:
        geom = VolumeGeometry.from_dict(d["geometry"])
        lesions = []
        for e in d["lesions"]:
            vox = np.zeros(geom.shape, dtype=bool)
            for s in e["slices"]:
                z = int(s["slice_index"])
                if not 0 <= z < geom.nz:
                    raise ValidationError(f"{path}: lesion {e['id']} slice {z} outside volume depth {geom.nz}")
                vox[z] = rle_decode(s["rle"], geom.nx, geom.ny).bits
            lesions.append(GroundTruthLesion(vox, str(e["ggg"]), str(e["id"])))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed lesion file: {exc}", str(path)) from exc
    return str(d["patient_id"]), lesions, geom


# --- evaluation reports ----------------------------------------------------

REPORT_FIELDS = ("patient_id", "lesion_id", "ggg", "detected", "matched_prediction", "dsc", "hd95_mm", "tpr")


def write_report(json_path: str | os.PathLike, records: list[tuple[str, LesionEvalRecord]], summary: dict,
                 params: dict, csv_path: str | os.PathLike | None = None) -> None:
    rows = [{"patient_id": pid, **r.to_dict()} for pid, r in sorted(records, key=lambda pr: pr[0])]
    write_json(json_path, {"records": rows, "summary": summary, "params": params, "provenance": provenance(params)})
    if csv_path is not None:
        buf = _io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(REPORT_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in REPORT_FIELDS})
        atomic_write_text(csv_path, buf.getvalue())


def read_report(path: str | os.PathLike) -> dict:
    d = read_json(path)
    if "records" not in d:
        raise ParseError("report has no records", str(path))
    return d
