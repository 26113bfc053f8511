"""Command-line entry point: ``bpmri-lesion <command>``.

Every option can also be set through an environment variable named
``BPMRI_LESION_<COMMAND>_<OPTION>`` (e.g. ``BPMRI_LESION_AGGREGATE_ALPHA``).

Exit codes: 0 success, 2 validation failure, 3 parse failure, 4 detector hook failure.
"""
from __future__ import annotations

import importlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .aggregate3d import AggregationParams, aggregate
from .ensemble import EnsembleConfig, TransformSpec, ensemble, invert_prediction, parse_transforms
from .errors import DetectorError, InvalidArgumentError, ParseError, ValidationError
from .io import (
    PredictionFile, read_json, read_lesions, read_predictions, read_report, write_json, write_lesions,
    write_predictions, write_report, write_volume,
)
from .masks import BinaryMask2D
from .metrics import HIGH_GRADE, match_lesions, stratified_summary
from .phantom import NOISE_PROFILES, RNG_ALGORITHM, PhantomConfig, ThresholdDetector, flatten, noisy_detector, phantom_cohort
from .preprocess import crop_box_for, mask_to_original, mask_to_patch, patch_transform_for
from .selftrain import ManifestEntry, SelectionStrategy, TrainingManifest, run_selftrain
from .stats import discordant_counts, mann_whitney_one_tailed, mcnemar, t_test_one_tailed

ENV_PREFIX = "BPMRI_LESION"
EXIT_VALIDATION, EXIT_PARSE, EXIT_DETECTOR = 2, 3, 4

log = logging.getLogger("bpmri_lesion")


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ParseError as exc:
            click.echo(f"parse error: {exc}", err=True)
            ctx.exit(EXIT_PARSE)
        except (ValidationError, InvalidArgumentError) as exc:
            click.echo(f"validation error: {exc}", err=True)
            ctx.exit(EXIT_VALIDATION)
        except DetectorError as exc:
            click.echo(f"detector hook error: {exc}", err=True)
            ctx.exit(EXIT_DETECTOR)


@click.group(cls=_Group, context_settings={"auto_envvar_prefix": ENV_PREFIX})
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True)
def main(verbose: int):
    """Lesion prediction post-processing, ensembling, self-training and evaluation."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


# --- phantom -----------------------------------------------------------------

@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--patients", type=int, default=4, show_default=True)
@click.option("--unlabeled", type=int, default=None, help="How many patients to leave unlabeled (default: half).")
@click.option("--noise-profile", type=click.Choice(sorted(NOISE_PROFILES)), default="none", show_default=True)
@click.option("--target", type=int, default=256, show_default=True, help="Patch size for patch-space predictions.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def phantom(seed, patients, unlabeled, noise_profile, target, out_dir):
    """Write a synthetic cohort: volumes, lesions, noisy 2D predictions and a manifest."""
    out = Path(out_dir)
    n_unlab = patients // 2 if unlabeled is None else unlabeled
    noise = NOISE_PROFILES[noise_profile]
    entries = []
    for i, (pid, ph) in enumerate(phantom_cohort(patients, seed)):
        g = ph.geometry
        write_volume(out / f"{pid}_image.raw", ph.volume, g)
        write_volume(out / f"{pid}_gland.raw", ph.gland, g)
        write_lesions(out / f"{pid}_lesions.json", pid, ph.lesions, g)
        preds = flatten(noisy_detector(ph.lesions, noise, ph.seed, g.shape))
        params = {"noise_profile": noise_profile, "seed": ph.seed, "rng": RNG_ALGORITHM}
        write_predictions(out / f"{pid}_pred2d.json",
                          PredictionFile(pid, g.nx, g.ny, "original", preds, params=params, geometry=g))
        t = patch_transform_for(crop_box_for(BinaryMask2D(ph.gland.any(axis=0)), 1), target)
        patch_preds = [replace(p, mask=mask_to_patch(p.mask, t)) for p in preds
                       if mask_to_patch(p.mask, t).area > 0]
        write_predictions(out / f"{pid}_pred2d_patch.json",
                          PredictionFile(pid, target, target, "patch", patch_preds, params=params, geometry=g, transform=t))
        labeled = i < patients - n_unlab
        entries.append(ManifestEntry(
            id=pid, volume=f"{pid}_image.raw", geometry=g,
            labels=[f"{pid}_lesions.json"] if labeled else [],
            label_provenance="human" if labeled else "none",
            biopsy_proven=not labeled, split="train",
            references=[] if labeled else [f"{pid}_lesions.json"],
        ))
    manifest = TrainingManifest(entries, 0, {"algorithm": RNG_ALGORITHM, "seed": seed})
    write_json(out / "manifest.json", {**manifest.to_dict(), "provenance": {"tool": "bpmri-lesion", "version": __version__,
                                                                            "params": {"seed": seed, "noise_profile": noise_profile}}})
    click.echo(f"wrote {patients} phantom patients to {out}")


# --- aggregate / ensemble / map-back ----------------------------------------

@main.command("aggregate")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("output_path", type=click.Path(dir_okay=False))
@click.option("--alpha", type=float, default=AggregationParams.alpha, show_default=True)
@click.option("--beta", type=float, default=AggregationParams.beta, show_default=True)
@click.option("--gamma", type=float, default=AggregationParams.gamma, show_default=True)
@click.option("--top-k", type=int, default=AggregationParams.top_k, show_default=True)
def aggregate_cmd(input_path, output_path, alpha, beta, gamma, top_k):
    """Aggregate per-slice predictions into top-k 3D predictions."""
    pf = read_predictions(input_path)
    params = AggregationParams(alpha, beta, gamma, top_k)
    preds = aggregate(pf.slices, params)
    out = replace(pf, predictions3d=preds, params={**pf.params, "aggregation": params.to_dict()})
    write_predictions(output_path, out)
    click.echo(f"{pf.patient_id}: {len(preds)} 3D predictions")


@main.command("ensemble")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "output_path", type=click.Path(dir_okay=False), required=True)
@click.option("--mode", type=click.Choice(["combination", "voting"]), default="combination", show_default=True)
@click.option("--transforms", default="",
              help="Transform each input was predicted under, e.g. 'identity,fliplr,rot:35'; "
                   "masks are mapped back before ensembling. Default: all identity.")
@click.option("--agree-dsc", type=float, default=EnsembleConfig.agree_dsc, show_default=True)
@click.option("--binarize-cutoff", type=float, default=EnsembleConfig.binarize_cutoff, show_default=True)
@click.option("--vote-score-cutoff", type=float, default=EnsembleConfig.vote_score_cutoff, show_default=True)
def ensemble_cmd(inputs, output_path, mode, transforms, agree_dsc, binarize_cutoff, vote_score_cutoff):
    """Combine or vote several prediction files of one patient."""
    files = [read_predictions(p) for p in inputs]
    specs = parse_transforms(transforms) if transforms else [TransformSpec("identity")] * len(files)
    if len(specs) != len(files):
        raise ValidationError(f"{len(specs)} transforms given for {len(files)} input files")
    first = files[0]
    for path, f in zip(inputs, files):
        if (f.patient_id, f.width, f.height) != (first.patient_id, first.width, first.height):
            raise ValidationError(f"{inputs[0]} and {path} disagree on patient or dimensions")
    pred_sets = []
    for f, t in zip(files, specs):
        inv = [invert_prediction(p, t) for p in f.slices]
        pred_sets.append([p for p in inv if p is not None])
    cfg = EnsembleConfig(agree_dsc, binarize_cutoff, vote_score_cutoff, mode)
    fused = ensemble(pred_sets, cfg)
    params = {"ensemble": cfg.to_dict(), "transforms": [str(t) for t in specs]}
    write_predictions(output_path, replace(first, slices=fused, predictions3d=[], params=params))
    click.echo(f"{first.patient_id}: {len(fused)} ensembled 2D predictions")


@main.command("map-back")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("output_path", type=click.Path(dir_okay=False))
def map_back(input_path, output_path):
    """Map patch-space predictions back to the original grid."""
    pf = read_predictions(input_path)
    if pf.space != "patch":
        raise ValidationError(f"{input_path} is already in {pf.space} space")
    if pf.transform is None or pf.geometry is None:
        raise ValidationError(f"{input_path} lacks the transform/geometry needed for map-back")
    g, t = pf.geometry, pf.transform

    def back(p):
        m = mask_to_original(p.mask, t, g)
        return None if m.is_empty() else replace(p, mask=m)

    slices = [q for q in (back(p) for p in pf.slices) if q is not None]
    preds3d = []
    for p3 in pf.predictions3d:
        members = tuple(q for q in (back(m) for m in p3.members) if q is not None)
        if members:
            preds3d.append(type(p3)(members))
    write_predictions(output_path, PredictionFile(pf.patient_id, g.nx, g.ny, "original", slices, preds3d,
                                                  {**pf.params, "mapped_from": "patch"}, g, None))
    click.echo(f"{pf.patient_id}: mapped {len(slices)} masks to {g.nx}x{g.ny}")


# --- evaluate / stats -------------------------------------------------------

@main.command()
@click.option("-p", "--pred", "preds", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction file with 3D predictions (original space).")
@click.option("-l", "--lesions", "lesion_files", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--match-dsc", type=float, default=0.15, show_default=True)
@click.option("--stratify", type=click.Choice(["ggg", "none"]), default="ggg", show_default=True)
@click.option("--out", "out_json", type=click.Path(dir_okay=False), required=True)
@click.option("--csv", "out_csv", type=click.Path(dir_okay=False), default=None)
def evaluate(preds, lesion_files, match_dsc, stratify, out_json, out_csv):
    """Match 3D predictions to ground-truth lesions and report the metrics."""
    gts = {}
    for path in lesion_files:
        pid, lesions, geom = read_lesions(path)
        gts[pid] = (path, lesions, geom)
    records = []
    for path in preds:
        pf = read_predictions(path)
        if pf.space != "original":
            raise ValidationError(f"{path}: metrics need original-space predictions, run map-back first")
        if pf.patient_id not in gts:
            raise ValidationError(f"{path}: no lesion file for patient {pf.patient_id}")
        gpath, lesions, geom = gts[pf.patient_id]
        if (pf.width, pf.height) != (geom.nx, geom.ny) or (pf.geometry and pf.geometry.shape != geom.shape):
            raise ValidationError(f"{path} and {gpath} disagree on the volume geometry")
        vols = [p.to_volume(geom.nz) for p in pf.predictions3d]
        records.extend((pf.patient_id, r) for r in match_lesions(lesions, vols, match_dsc, geom))
    rec_only = [r for _, r in records]
    summary = stratified_summary(rec_only) if stratify == "ggg" else {"all": stratified_summary(rec_only)["all"]}
    write_report(out_json, records, summary, {"match_dsc": match_dsc, "stratify": stratify}, out_csv)
    s = summary["all"]
    click.echo(f"detection rate {s['detection_rate']:.3f} ({s['detected']}/{s['lesions']})")


def _records(report: dict, stratum: str) -> list[dict]:
    rows = report["records"]
    if stratum == "ggg_gt2":
        rows = [r for r in rows if r["ggg"] in HIGH_GRADE]
    return rows


@main.command()
@click.argument("report_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("report_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_name", type=click.Choice(["t", "mw", "mcnemar"]), required=True)
@click.option("--metric", type=click.Choice(["dsc", "tpr", "hd95_mm", "detected"]), default=None,
              help="Default: dsc for t, hd95_mm for mw, detected for mcnemar.")
@click.option("--tail", type=click.Choice(["one"]), default="one", show_default=True)
@click.option("--alternative", type=click.Choice(["greater", "less"]), default=None,
              help="Direction for A vs B; default 'less' for hd95_mm, else 'greater'.")
@click.option("--stratum", type=click.Choice(["all", "ggg_gt2"]), default="all", show_default=True)
def stats(report_a, report_b, test_name, metric, tail, alternative, stratum):
    """One-tailed comparison of two evaluation reports (A better than B?)."""
    a, b = read_report(report_a), read_report(report_b)
    ra, rb = _records(a, stratum), _records(b, stratum)
    metric = metric or {"t": "dsc", "mw": "hd95_mm", "mcnemar": "detected"}[test_name]
    alternative = alternative or ("less" if metric == "hd95_mm" else "greater")
    if test_name == "mcnemar":
        key = lambda r: (r["patient_id"], r["lesion_id"])
        da, db = {key(r): bool(r["detected"]) for r in ra}, {key(r): bool(r["detected"]) for r in rb}
        if set(da) != set(db):
            raise ValidationError(f"{report_a} and {report_b} cover different lesions")
        keys = sorted(da)
        bc = discordant_counts([da[k] for k in keys], [db[k] for k in keys])
        if alternative == "less":
            bc = bc[::-1]
        p = mcnemar(*bc)
        detail = {"b": bc[0], "c": bc[1]}
    else:
        xa = [r[metric] for r in ra if r["detected"]]
        xb = [r[metric] for r in rb if r["detected"]]
        fn = t_test_one_tailed if test_name == "t" else mann_whitney_one_tailed
        p = fn(xa, xb, alternative)
        detail = {"n_a": len(xa), "n_b": len(xb)}
    result = {"test": test_name, "metric": metric, "tail": tail, "alternative": alternative,
              "stratum": stratum, "p_value": p, **detail}
    click.echo(json.dumps(result))


# --- selftrain --------------------------------------------------------------

def _load_hook(spec: str):
    mod_name, _, attr = spec.partition(":")
    try:
        factory = getattr(importlib.import_module(mod_name), attr or "make_detector")
    except Exception as exc:
        raise DetectorError(f"cannot load detector hook {spec!r}: {exc}") from exc
    return factory


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--strategy", type=click.Choice(["s1", "s2"], case_sensitive=False), default="s1", show_default=True)
@click.option("--iterations", type=int, default=3, show_default=True)
@click.option("--transforms", default="fliplr,flipud", show_default=True)
@click.option("--s1-reference-dsc", type=float, default=0.5, show_default=True)
@click.option("--detector", type=click.Choice(["threshold"]), default="threshold", show_default=True,
              help="Built-in detector used when no hook is given.")
@click.option("--detector-hook", default=None,
              help="'module:factory'; factory(manifest, round) returns an object with predict(volume).")
@click.option("--alpha", type=float, default=AggregationParams.alpha)
@click.option("--beta", type=float, default=AggregationParams.beta)
@click.option("--gamma", type=float, default=AggregationParams.gamma)
@click.option("--top-k", type=int, default=AggregationParams.top_k)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Recorded in manifests; built-in detectors are deterministic.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def selftrain(manifest_path, strategy, iterations, transforms, s1_reference_dsc, detector, detector_hook,
              alpha, beta, gamma, top_k, workers, seed, out_dir):
    """Run self-training rounds, emitting one manifest per round."""
    root = Path(manifest_path).parent
    manifest = TrainingManifest.from_dict(read_json(manifest_path))
    if detector_hook:
        hook = _load_hook(detector_hook)

        def factory(m, r):
            try:
                return hook(m, r)
            except Exception as exc:
                raise DetectorError(f"detector hook failed in round {r}: {exc}") from exc
    else:
        factory = lambda m, r: ThresholdDetector()
    manifest.rng.setdefault("seed", seed)
    snaps = run_selftrain(
        manifest, factory, SelectionStrategy(strategy.upper(), s1_reference_dsc), parse_transforms(transforms),
        AggregationParams(alpha, beta, gamma, top_k), iterations, root=root, out_dir=out_dir or root, workers=workers,
    )
    for s in snaps:
        n_pseudo = sum(e.label_provenance == "pseudo" for e in s.entries)
        click.echo(f"iteration {s.iteration}: {n_pseudo} pseudo-labeled patients")


# --- nonlocal-check ----------------------------------------------------------

@main.command("nonlocal-check")
@click.option("--mode", type=click.Choice(["global", "per_row"]), default="global", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=8, show_default=True, help="Spatial size of the gradient-check input.")
@click.option("--draws", type=int, default=20, show_default=True)
def nonlocal_check(mode, seed, size, draws):
    """Verify the non-local block: shapes, normalization, residual identity, gradients."""
    from .nonlocal_attention import NonLocalParams, attention_map, finite_difference_check, nl_forward

    rng = np.random.default_rng(seed)
    rows = []
    x = rng.normal(size=(256, 256, 2))
    ip, a = nl_forward(x, NonLocalParams.random(2, rng=rng, softmax_mode=mode), 4)
    rows.append(("shape 256x256x2 -> 256x256x2", ip.shape == x.shape and a.shape == x.shape, f"{ip.shape}"))
    s = attention_map(rng.normal(size=(16, 16, 2)), NonLocalParams.random(2, rng=rng, softmax_mode=mode), 2)
    err = abs(s.sum() - 1.0) if mode == "global" else float(np.max(np.abs(s.sum(axis=1) - 1.0)))
    rows.append(("softmax normalization", err <= 1e-9, f"{err:.2e}"))
    ip0, _ = nl_forward(x, NonLocalParams.zeros(2, softmax_mode=mode), 4)
    rows.append(("zero-weight residual identity", bool(np.array_equal(ip0, x)), ""))
    worst = 0.0
    for _ in range(draws):
        p = NonLocalParams.random(2, rng=rng, softmax_mode=mode)
        worst = max(worst, finite_difference_check(rng.normal(size=(size, size, 2)), p, 2, rng))
    rows.append((f"finite differences ({draws} draws)", worst <= 1e-5, f"max rel err {worst:.2e}"))
    ok = True
    for name, passed, info in rows:
        ok &= bool(passed)
        click.echo(f"{'PASS' if passed else 'FAIL'}  {name:<36} {info}")
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
