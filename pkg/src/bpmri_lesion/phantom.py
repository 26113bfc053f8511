"""Synthetic prostate-like phantoms and stand-in detectors.

All randomness flows through ``numpy.random.Generator(PCG64(seed))`` so a
(config, seed) pair fully determines the output.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidArgumentError
from .masks import BinaryMask2D, ScoredMask2D, VolumeGeometry
from .metrics import GRADE_GROUPS, GroundTruthLesion

RNG_ALGORITHM = "PCG64"

BACKGROUND, GLAND, LESION = 0.0, 0.5, 1.0
# T2WI shows lesions dark, ADC map dark too; both are inverted here so a single threshold finds them
CHANNEL_LEVELS = ((0.05, 0.45, 0.95), (0.0, 0.55, 1.0))
# cap slices whose in-plane radius drops below this fraction are cut so adjacent slices stay linkable
MIN_SECTION_FRACTION = 0.6


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class PhantomConfig:
    geometry: VolumeGeometry = field(default_factory=lambda: VolumeGeometry(64, 64, 12, 0.625, 0.625, 3.0))
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (3.0, 6.0)
    ggg_weights: tuple[float, ...] = (4, 2, 16, 1, 7, 3, 8, 0)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise InvalidArgumentError("invalid lesion_count range")
        rlo, rhi = self.lesion_radius_mm
        if rlo <= 0 or rhi < rlo:
            raise InvalidArgumentError("lesion radii must be positive")
        if len(self.ggg_weights) != len(GRADE_GROUPS) or sum(self.ggg_weights) <= 0:
            raise InvalidArgumentError("ggg_weights needs one non-negative weight per grade group")


@dataclass(frozen=True)
class NoiseConfig:
    boundary_px: tuple[int, int] = (0, 0)
    slice_drop_prob: float = 0.0
    fp_count: tuple[int, int] = (0, 0)
    fp_score_mean: float = 0.5
    fp_score_std: float = 0.15
    fp_radius_px: tuple[int, int] = (2, 4)
    score_noise_std: float = 0.0
    base_score: float = 1.0
    boundary_penalty: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.slice_drop_prob <= 1.0:
            raise InvalidArgumentError("slice_drop_prob must lie in [0, 1]")
        if self.score_noise_std < 0 or self.fp_score_std < 0:
            raise InvalidArgumentError("noise std must be >= 0")
        if self.fp_count[0] < 0 or self.fp_count[1] < self.fp_count[0]:
            raise InvalidArgumentError("invalid fp_count range")
        if self.boundary_px[1] < self.boundary_px[0]:
            raise InvalidArgumentError("invalid boundary_px range")


NOISE_PROFILES = {
    "none": NoiseConfig(),
    "low": NoiseConfig(boundary_px=(-1, 1), slice_drop_prob=0.05, fp_count=(0, 2), score_noise_std=0.03),
    "med": NoiseConfig(boundary_px=(-2, 2), slice_drop_prob=0.1, fp_count=(1, 4), score_noise_std=0.08,
                       fp_score_mean=0.6, fp_score_std=0.2),
    "high": NoiseConfig(boundary_px=(-3, 3), slice_drop_prob=0.25, fp_count=(3, 8), score_noise_std=0.15,
                        fp_score_mean=0.7, fp_score_std=0.2),
}


@dataclass
class Phantom:
    volume: np.ndarray  # (2, nz, ny, nx) float32
    gland: np.ndarray  # (nz, ny, nx) bool
    lesions: list[GroundTruthLesion]
    geometry: VolumeGeometry
    seed: int


def _ellipsoid(geom: VolumeGeometry, center_mm, radii_mm) -> np.ndarray:
    z, y, x = np.meshgrid(
        np.arange(geom.nz) * geom.sz, np.arange(geom.ny) * geom.sy, np.arange(geom.nx) * geom.sx, indexing="ij"
    )
    cz, cy, cx = center_mm
    rz, ry, rx = radii_mm
    return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2


def gen_phantom(cfg: PhantomConfig) -> Phantom:
    """Ellipsoidal gland with non-touching, truncated-ellipsoid lesions inside it."""
    rng = make_rng(cfg.seed)
    g = cfg.geometry
    ext = np.array([g.nz * g.sz, g.ny * g.sy, g.nx * g.sx])
    center = (ext - np.array([g.sz, g.sy, g.sx])) / 2.0
    gland_r = ext * np.array([0.45, 0.38, 0.42])
    gland = _ellipsoid(g, center, gland_r) <= 1.0

    n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    weights = np.asarray(cfg.ggg_weights, dtype=float)
    occupied = np.zeros(g.shape, dtype=bool)
    lesions: list[GroundTruthLesion] = []
    retries = 0
    while len(lesions) < n:
        if retries >= cfg.max_retries:
            raise ConfigError(f"could not place {n} lesions after {cfg.max_retries} attempts")
        retries += 1
        r = rng.uniform(*cfg.lesion_radius_mm)
        rz = max(r, g.sz)
        cz = rng.integers(0, g.nz) * g.sz
        cy, cx = rng.uniform(center[1:] - gland_r[1:] * 0.7, center[1:] + gland_r[1:] * 0.7)
        d = _ellipsoid(g, (cz, cy, cx), (rz, r, r))
        dz = (np.arange(g.nz) * g.sz - cz) / rz
        keep_slices = np.sqrt(np.clip(1.0 - dz ** 2, 0.0, None)) >= MIN_SECTION_FRACTION
        vox = (d <= 1.0) & keep_slices[:, None, None]
        if not vox.any() or not np.all(gland[vox]):
            continue
        if np.any(ndimage.binary_dilation(vox, iterations=1) & occupied):
            continue
        grade = GRADE_GROUPS[int(rng.choice(len(GRADE_GROUPS), p=weights / weights.sum()))]
        lesions.append(GroundTruthLesion(vox, grade, f"L{len(lesions)}"))
        occupied |= vox

    label = np.where(gland, GLAND, BACKGROUND)
    label[occupied] = LESION
    volume = np.empty((2,) + g.shape, dtype=np.float32)
    for c, levels in enumerate(CHANNEL_LEVELS):
        volume[c] = np.select([label == BACKGROUND, label == GLAND], [levels[0], levels[1]], levels[2])
    return Phantom(volume, gland, lesions, g, cfg.seed)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx ** 2 + yy ** 2 <= radius ** 2


def perturb(section: np.ndarray, magnitude: int) -> np.ndarray:
    """Dilate (positive) or erode (negative) with a disk; erosion backs off rather than emptying the mask."""
    if magnitude > 0:
        return ndimage.binary_dilation(section, structure=_disk(magnitude))
    for m in range(-magnitude, 0, -1):
        eroded = ndimage.binary_erosion(section, structure=_disk(m))
        if eroded.any():
            return eroded
    return section.copy()


def noisy_detector(lesions, noise: NoiseConfig, seed: int, shape: tuple[int, int, int] | None = None) -> list[list[ScoredMask2D]]:
    """Per-slice predictions derived from ground truth with controlled corruption.

    Every lesion cross-section is dropped with ``slice_drop_prob``, otherwise
    perturbed by a disk of radius drawn from ``boundary_px`` and scored
    ``base_score - boundary_penalty * |radius| + N(0, score_noise_std)``
    clamped to [0, 1]. False-positive discs are then sprinkled at random.
    """
    rng = make_rng(seed)
    lesions = list(lesions)
    if shape is None:
        if not lesions:
            raise InvalidArgumentError("shape is required when there are no lesions")
        shape = lesions[0].voxels.shape
    nz, ny, nx = shape
    out: list[list[ScoredMask2D]] = [[] for _ in range(nz)]
    for lesion in lesions:
        for z in lesion.slices:
            drop = rng.random() < noise.slice_drop_prob
            mag = int(rng.integers(noise.boundary_px[0], noise.boundary_px[1] + 1))
            jitter = rng.normal(0.0, noise.score_noise_std) if noise.score_noise_std > 0 else 0.0
            if drop:
                continue
            section = perturb(lesion.voxels[z], mag)
            score = float(np.clip(noise.base_score - noise.boundary_penalty * abs(mag) + jitter, 0.0, 1.0))
            out[z].append(ScoredMask2D(BinaryMask2D(section), score, z))
    n_fp = int(rng.integers(noise.fp_count[0], noise.fp_count[1] + 1))
    yy, xx = np.mgrid[0:ny, 0:nx]
    for _ in range(n_fp):
        z = int(rng.integers(0, nz))
        r = int(rng.integers(noise.fp_radius_px[0], noise.fp_radius_px[1] + 1))
        cy, cx = rng.integers(0, ny), rng.integers(0, nx)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        score = float(np.clip(rng.normal(noise.fp_score_mean, noise.fp_score_std), 0.0, 1.0))
        out[z].append(ScoredMask2D(BinaryMask2D(blob), score, z))
    return out


class ThresholdDetector:
    """Image-based stand-in detector: connected components of bright lesion signal.

    On a phantom it recovers every lesion cross-section exactly, and because
    it only looks at pixel values it behaves equivariantly under flips and
    rotations. ``region`` optionally blinds it to part of its input (used to
    build detectors that degrade under a particular transform).
    """

    thread_safe = True

    def __init__(self, threshold: float = 0.75, score: float = 1.0, min_area: int = 1,
                 region=None):
        self.threshold = threshold
        self.score = score
        self.min_area = min_area
        self.region = region

    def predict(self, volume: np.ndarray) -> list[list[ScoredMask2D]]:
        vol = np.asarray(volume, dtype=float)
        if vol.ndim != 4:
            raise InvalidArgumentError("detector input must be (channels, nz, ny, nx)")
        signal = vol.mean(axis=0) > self.threshold
        out = []
        for z in range(signal.shape[0]):
            labels, n = ndimage.label(signal[z])
            preds = []
            for k in range(1, n + 1):
                comp = labels == k
                if comp.sum() < self.min_area:
                    continue
                if self.region is not None and not self.region(comp):
                    continue
                preds.append(ScoredMask2D(BinaryMask2D(comp), self.score, z))
            out.append(preds)
        return out


def left_half_only(comp: np.ndarray) -> bool:
    """Region filter keeping components whose centroid lies in the left half."""
    xs = np.nonzero(comp)[1]
    return xs.mean() < comp.shape[1] / 2.0


def flatten(per_slice) -> list[ScoredMask2D]:
    return [p for preds in per_slice for p in preds]


def phantom_cohort(n_patients: int, seed: int, cfg: PhantomConfig | None = None) -> list[tuple[str, Phantom]]:
    """Phantoms for ``n_patients`` with per-patient seeds derived from ``seed``."""
    cfg = cfg or PhantomConfig()
    seeds = np.random.SeedSequence(seed).generate_state(n_patients, dtype=np.uint64)
    return [(f"P{i:03d}", gen_phantom(replace(cfg, seed=int(s)))) for i, s in enumerate(seeds)]
