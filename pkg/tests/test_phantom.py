import numpy as np
import pytest

from bpmri_lesion.aggregate3d import aggregate
from bpmri_lesion.errors import ConfigError
from bpmri_lesion.masks import VolumeGeometry
from bpmri_lesion.metrics import match_lesions
from bpmri_lesion.phantom import (
    NOISE_PROFILES, RNG_ALGORITHM, NoiseConfig, PhantomConfig, ThresholdDetector, flatten, gen_phantom,
    noisy_detector, perturb, phantom_cohort,
)


def test_same_seed_bit_identical():
    a = gen_phantom(PhantomConfig(seed=42))
    b = gen_phantom(PhantomConfig(seed=42))
    assert a.volume.tobytes() == b.volume.tobytes()
    assert [l.voxels.tobytes() for l in a.lesions] == [l.voxels.tobytes() for l in b.lesions]
    assert [l.ggg for l in a.lesions] == [l.ggg for l in b.lesions]
    assert RNG_ALGORITHM == "PCG64"


def test_lesion_free_volume():
    ph = gen_phantom(PhantomConfig(seed=1, lesion_count=(0, 0)))
    assert ph.lesions == []
    assert ph.volume.shape == (2, 12, 64, 64)
    assert ph.volume.max() < 0.75


def test_three_lesions_disjoint_inside_gland():
    for seed in range(5):
        ph = gen_phantom(PhantomConfig(seed=seed, lesion_count=(3, 3)))
        assert len(ph.lesions) == 3
        total = np.zeros(ph.geometry.shape, int)
        for l in ph.lesions:
            total += l.voxels
            assert np.all(ph.gland[l.voxels])
        assert total.max() == 1


def test_infeasible_placement():
    cfg = PhantomConfig(seed=0, lesion_count=(50, 50), lesion_radius_mm=(8, 9), max_retries=30)
    with pytest.raises(ConfigError):
        gen_phantom(cfg)


def test_zero_noise_detector_is_ground_truth():
    ph = gen_phantom(PhantomConfig(seed=7, lesion_count=(2, 2)))
    per_slice = noisy_detector(ph.lesions, NOISE_PROFILES["none"], seed=1)
    for l in ph.lesions:
        for z in l.slices:
            assert any(np.array_equal(p.mask.bits, l.voxels[z]) and p.score == 1.0 for p in per_slice[z])
    assert sum(len(v) for v in per_slice) == sum(len(l.slices) for l in ph.lesions)


def test_slice_drop_leaves_only_false_positives():
    ph = gen_phantom(PhantomConfig(seed=7, lesion_count=(2, 2)))
    noise = NoiseConfig(slice_drop_prob=1.0, fp_count=(3, 3))
    preds = flatten(noisy_detector(ph.lesions, noise, seed=2))
    assert len(preds) == 3
    lesion_union = np.logical_or.reduce([l.voxels for l in ph.lesions])
    for p in preds:
        assert p.mask.area >= 1
    assert all(p.slice_index < ph.geometry.nz for p in preds)
    # false positives are placed at random, not derived from any lesion cross-section
    assert not any(np.array_equal(p.mask.bits, lesion_union[p.slice_index]) for p in preds)


def test_perturb():
    m = np.zeros((15, 15), bool)
    m[5:10, 5:10] = True
    assert perturb(m, 1).sum() > m.sum()
    assert 0 < perturb(m, -1).sum() < m.sum()
    tiny = np.zeros((5, 5), bool)
    tiny[2, 2] = True
    assert np.array_equal(perturb(tiny, -3), tiny)


def test_threshold_detector_recovers_zero_noise_phantoms():
    for seed in range(10):
        ph = gen_phantom(PhantomConfig(seed=seed, lesion_count=(3, 3)))
        preds = aggregate(flatten(ThresholdDetector().predict(ph.volume)))
        recs = match_lesions(ph.lesions, [p.to_volume(ph.geometry.nz) for p in preds], 0.15, ph.geometry)
        assert all(r.detected and r.dsc >= 0.99 for r in recs)


def test_cohort_ids_and_seeds():
    a = phantom_cohort(3, 5)
    b = phantom_cohort(3, 5)
    assert [pid for pid, _ in a] == ["P000", "P001", "P002"]
    assert [ph.seed for _, ph in a] == [ph.seed for _, ph in b]
    assert len({ph.seed for _, ph in a}) == 3


def test_custom_geometry():
    g = VolumeGeometry(48, 40, 8, 0.8, 0.8, 3.0)
    ph = gen_phantom(PhantomConfig(geometry=g, seed=3))
    assert ph.volume.shape == (2, 8, 40, 48)
