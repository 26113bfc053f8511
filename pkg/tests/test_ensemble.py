import numpy as np
import pytest

from bpmri_lesion.aggregate3d import AggregationParams
from bpmri_lesion.ensemble import (
    IDENTITY, EnsembleConfig, TransformSpec, agreement_groups, apply_transform, apply_transform_volume,
    combine2d, ensemble, invert_prediction, parse_transforms, predict_with_transform, select_transforms, vote2d,
)
from bpmri_lesion.errors import InvalidArgumentError
from bpmri_lesion.masks import BinaryMask2D, ScoredMask2D, dice2d
from bpmri_lesion.phantom import PhantomConfig, ThresholdDetector, gen_phantom, left_half_only
from conftest import ellipse_blob

FLIPLR, FLIPUD = TransformSpec("fliplr"), TransformSpec("flipud")


def rot(a):
    return TransformSpec("rotate", a)


def rect(x0, y0, w, h, size=(16, 16)):
    m = np.zeros(size, bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return BinaryMask2D(m)


def sm(mask, score, z=0):
    return ScoredMask2D(mask, score, z)


# --- transforms ----------------------------------------------------------------

def test_parse_and_inverse():
    ts = parse_transforms("fliplr, flipud,rot:35")
    assert ts == [FLIPLR, FLIPUD, rot(35)]
    assert rot(35).inverse() == rot(325)
    assert FLIPLR.inverse() == FLIPLR
    assert str(rot(35)) == "rot:35"
    with pytest.raises(InvalidArgumentError):
        TransformSpec.parse("shear")
    with pytest.raises(InvalidArgumentError):
        rot(360)


@pytest.mark.parametrize("shape", [(7, 7), (6, 9)])
def test_flips_are_exact_involutions(shape):
    rng = np.random.default_rng(0)
    m = rng.random(shape) < 0.4
    img = rng.random(shape)
    for t in (FLIPLR, FLIPUD):
        assert np.array_equal(apply_transform(apply_transform(m, t), t), m)
        assert np.array_equal(apply_transform(apply_transform(img, t), t), img)


def test_rot90_four_times_is_identity():
    rng = np.random.default_rng(1)
    m = rng.random((9, 9)) < 0.5
    out = m
    for _ in range(4):
        out = apply_transform(out, rot(90))
    assert np.array_equal(out, m)
    assert np.array_equal(apply_transform(apply_transform(m, rot(90)), rot(270)), m)
    assert np.array_equal(apply_transform(apply_transform(m, rot(180)), rot(180)), m)


def test_rot90_matches_numpy_on_square():
    rng = np.random.default_rng(2)
    m = rng.random((8, 8)) < 0.5
    r = apply_transform(m, rot(90))
    assert np.array_equal(r, np.rot90(m, 1)) or np.array_equal(r, np.rot90(m, -1))


def test_quarter_turn_fast_path_agrees_with_general_rotation():
    rng = np.random.default_rng(6)
    for _ in range(10):
        blob = ellipse_blob(64, 64, rng, min_area=100, inscribed=True)
        fast = apply_transform(blob, rot(90))
        general = apply_transform(blob, rot(89.5))
        assert dice2d(fast, general) >= 0.9


def test_rotation_round_trip_dsc():
    rng = np.random.default_rng(3)
    for angle in (35.0, 325.0):
        for _ in range(30):
            blob = ellipse_blob(64, 64, rng, min_area=100, inscribed=True)
            back = apply_transform(apply_transform(blob.bits, rot(angle)), rot(angle).inverse())
            assert dice2d(BinaryMask2D(back), blob) >= 0.95


def test_apply_transform_keeps_mask_type():
    m = rect(1, 1, 3, 2)
    out = apply_transform(m, FLIPLR)
    assert isinstance(out, BinaryMask2D)
    assert out == rect(12, 1, 3, 2)


def test_volume_transform_acts_per_slice():
    rng = np.random.default_rng(4)
    vol = rng.random((2, 3, 8, 8))
    out = apply_transform_volume(vol, FLIPUD)
    assert np.array_equal(out, vol[:, :, ::-1, :])


def test_invert_prediction_vanishing_mask():
    corner = sm(rect(0, 0, 1, 1), 0.9)
    assert invert_prediction(corner, rot(45)) is None
    assert invert_prediction(corner, FLIPLR).mask == rect(15, 0, 1, 1)


# --- combination and voting ---------------------------------------------------------

def test_combine_single_source_passthrough():
    preds = [sm(rect(0, 0, 2, 2), 0.4), sm(rect(5, 5, 2, 2), 0.95)]
    assert combine2d([preds]) == preds


def test_combine_identical_masks_average_score():
    m = rect(2, 2, 4, 4)
    out = combine2d([[sm(m, 0.8)], [sm(m, 0.6)]])
    assert len(out) == 1
    assert out[0].mask == m and out[0].score == pytest.approx(0.7)


def test_combine_keeps_disjoint_predictions():
    a, b = sm(rect(0, 0, 3, 3), 0.8), sm(rect(10, 10, 3, 3), 0.3)
    out = combine2d([[a], [b]])
    assert sorted(p.score for p in out) == [0.3, 0.8]


def test_combine_averages_overlapping_masks():
    a = rect(0, 0, 4, 4)
    b = rect(0, 0, 4, 5)
    c = rect(0, 0, 5, 4)
    out = combine2d([[sm(a, 0.9)], [sm(b, 0.9)], [sm(c, 0.6)]])
    assert len(out) == 1
    assert out[0].mask == a  # pixels with >= half the votes
    assert out[0].score == pytest.approx(0.8)


def five_sources(entries):
    """entries: list of (source index, mask, score)."""
    sets = [[] for _ in range(5)]
    for src, m, s in entries:
        sets[src].append(sm(m, s))
    return sets


def test_vote_three_of_five_kept():
    m = rect(3, 3, 5, 5)
    out = vote2d(five_sources([(0, m, 0.9), (1, m, 0.9), (2, m, 0.9)]))
    assert len(out) == 1 and out[0].score == pytest.approx(0.9) and out[0].mask == m


def test_vote_single_source_rejected():
    out = vote2d(five_sources([(4, rect(3, 3, 5, 5), 0.99)]))
    assert out == []


def test_vote_low_mean_score_rejected():
    m = rect(3, 3, 5, 5)
    out = vote2d(five_sources([(0, m, 0.8), (1, m, 0.8), (2, m, 0.8)]))
    assert out == []


def test_vote_requires_strict_majority():
    m = rect(3, 3, 5, 5)
    assert vote2d([[sm(m, 0.9)], [sm(m, 0.9)], [], []]) == []
    assert len(vote2d([[sm(m, 0.9)], [sm(m, 0.9)], [sm(m, 0.9)], []])) == 1


def test_worked_example_pattern():
    # two lesions agreed by most sources, a lone prediction, and a weakly scored agreement
    right = rect(1, 1, 4, 4)
    mid = rect(6, 6, 4, 4)
    left = rect(12, 1, 3, 3)
    weak = rect(10, 11, 4, 4)
    entries = [(s, right, 0.95) for s in range(4)] + [(s, mid, 0.9) for s in (0, 1, 3)]
    entries += [(2, left, 0.9)] + [(s, weak, 0.8) for s in (1, 2, 4)]
    out = vote2d(five_sources(entries))
    assert {p.mask for p in out} == {right, mid}
    combined = combine2d(five_sources(entries))
    assert {p.mask for p in combined} == {right, mid, left, weak}


def test_agreement_groups_one_member_per_source():
    m = rect(3, 3, 5, 5)
    m2 = rect(3, 3, 5, 6)
    groups = agreement_groups([[sm(m, 0.9), sm(m2, 0.8)], [sm(m, 0.7)]], 0.7)
    assert [len(g.members) for g in groups] == [2, 1]
    for g in groups:
        assert len(g.sources) == len(g.members)


def test_vote_output_subset_of_combine():
    rng = np.random.default_rng(8)
    for _ in range(50):
        sets = []
        for _src in range(5):
            preds = []
            for _ in range(rng.integers(0, 3)):
                x, y = rng.integers(0, 10, size=2)
                preds.append(sm(rect(int(x), int(y), 5, 5), float(rng.choice([0.7, 0.85, 0.9, 1.0]))))
            sets.append(preds)
        voted = vote2d(sets)
        combined = combine2d(sets)
        for v in voted:
            assert v in combined
            assert v.score >= 0.85


def test_ensemble_dispatch():
    m = rect(3, 3, 5, 5)
    sets = [[sm(m, 0.9)], [sm(m, 0.9)], [sm(rect(0, 10, 2, 2), 0.9)]]
    assert len(ensemble(sets, EnsembleConfig(mode="voting"))) == 1
    assert len(ensemble(sets, EnsembleConfig(mode="combination"))) == 2


# --- transform search -------------------------------------------------------------

class Patient:
    def __init__(self, phantom):
        self.volume = phantom.volume
        self.lesions = phantom.lesions
        self.geometry = phantom.geometry


def cohort(seeds, **kw):
    return [Patient(gen_phantom(PhantomConfig(seed=s, **kw))) for s in seeds]


def test_predict_with_identity_recovers_phantom():
    ph = gen_phantom(PhantomConfig(seed=3, lesion_count=(2, 2)))
    preds = predict_with_transform(ThresholdDetector(), ph.volume, IDENTITY)
    union = np.zeros(ph.geometry.shape, bool)
    for p in preds:
        union[p.slice_index] |= p.mask.bits
    assert np.array_equal(union, np.logical_or.reduce([l.voxels for l in ph.lesions]))


def test_select_transforms_step_90_ties_pick_smallest_angles():
    evaluated = []
    chosen = select_transforms(ThresholdDetector(), cohort([1, 2]), rotation_step_deg=90,
                               progress=lambda t, s: evaluated.append(t))
    assert chosen == [rot(90), rot(180)]
    assert [t for t in evaluated if t.kind == "rotate"] == [rot(90), rot(180), rot(270)]


def test_select_transforms_excludes_degrading_flip():
    # blind to the right half: flipping left-right moves lesions out of view
    det = ThresholdDetector(region=left_half_only)
    val = cohort(range(10, 16), lesion_count=(2, 3))
    chosen = select_transforms(det, val, rotation_step_deg=90)
    assert FLIPLR not in chosen


def test_select_transforms_keeps_improving_flip():
    # lesions placed on the right are invisible without the flip
    det = ThresholdDetector(region=left_half_only)
    val = []
    for s in range(20, 60):
        p = Patient(gen_phantom(PhantomConfig(seed=s, lesion_count=(1, 1))))
        xs = np.nonzero(p.lesions[0].voxels)[2]
        if xs.mean() > p.geometry.nx / 2.0:
            val.append(p)
        if len(val) == 3:
            break
    assert len(val) == 3
    chosen = select_transforms(det, val, rotation_step_deg=90)
    assert FLIPLR in chosen


def test_select_transforms_validation():
    with pytest.raises(InvalidArgumentError):
        select_transforms(ThresholdDetector(), [])
    with pytest.raises(InvalidArgumentError):
        select_transforms(ThresholdDetector(), cohort([1]), rotation_step_deg=0)


def test_config_defaults():
    cfg = EnsembleConfig()
    assert (cfg.agree_dsc, cfg.vote_score_cutoff, cfg.binarize_cutoff) == (0.7, 0.85, 0.5)
    assert AggregationParams().to_dict() == {"alpha": 0.35, "beta": 0.7, "gamma": 0.7, "top_k": 5}
