import numpy as np
import pytest
from hypothesis import given, strategies as st

from spinemark import evaluate as E
from spinemark.data import AnnotationSet, Volume
from spinemark.losses import BACKGROUND, SampleTarget
from spinemark.net import CnnArch, build_cnn, convert_to_fcn

points = st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False)] * 3)


# aggregation ------------------------------------------------------------------

def test_single_votes_returned_verbatim():
    out = E.aggregate([(3, (1.5, 2.5, 3.5)), (9, (7.0, 8.0, 9.0))])
    assert out[3].centroid_voxel == (1.5, 2.5, 3.5) and out[3].support_count == 1
    assert out[9].centroid_voxel == (7.0, 8.0, 9.0)


def test_median_ignores_outlier():
    votes = [(4, (10, 10, 10))] * 3 + [(4, (100, 100, 100))]
    assert E.aggregate(votes)[4].centroid_voxel == (10, 10, 10)


def test_empty_and_background_votes():
    assert E.aggregate([]) == {}
    assert E.aggregate([(BACKGROUND, (1, 2, 3))]) == {}


def test_even_count_takes_lower_median():
    out = E.aggregate([(0, (1, 9, 5)), (0, (3, 2, 6)), (0, (2, 4, 8)), (0, (4, 1, 7))])
    assert out[0].centroid_voxel == (2, 2, 6)


@given(st.lists(st.tuples(st.integers(0, 3), points), min_size=1, max_size=25), st.randoms())
def test_aggregate_matches_sort_oracle_and_is_permutation_invariant(votes, rnd):
    out = E.aggregate(votes)
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    assert E.aggregate(shuffled) == out
    for label, pred in out.items():
        pts = [p for k, p in votes if k == label]
        ref = tuple(sorted(p[i] for p in pts)[(len(pts) - 1) // 2] for i in range(3))
        assert pred.centroid_voxel == ref
        assert pred.support_count == len(pts)
        for i in range(3):
            assert min(p[i] for p in pts) <= pred.centroid_voxel[i] <= max(p[i] for p in pts)


# sample metrics -----------------------------------------------------------------

def test_perfect_sample_predictions():
    t = [SampleTarget(2, (1.0, 2.0, 3.0)), SampleTarget(BACKGROUND)]
    assert E.sample_metrics([2, BACKGROUND], [[1.0, 2.0, 3.0], [0, 0, 0]], t) == (1.0, 0.0)


def test_three_four_five():
    acc, err = E.sample_metrics([7], [[3.0, 4.0, 0.0]], [SampleTarget(7, (0.0, 0.0, 0.0))])
    assert acc == 1.0 and err == 5.0


def test_sample_metrics_direct_summation(rng):
    n = 12
    labels = rng.integers(0, 27, n)
    targets = [SampleTarget(int(k), tuple(rng.uniform(0, 30, 3))) for k in labels]
    pred_lab = np.where(rng.random(n) < 0.6, labels, rng.integers(0, 27, n))
    pred_off = rng.uniform(0, 30, (n, 3))
    spacing = (1.25, 1.0, 1.0)
    acc, err = E.sample_metrics(pred_lab, pred_off, targets, spacing)
    total, m = 0.0, 0
    for k, t in enumerate(targets):
        if t.label != BACKGROUND:
            total += sum(((pred_off[k][i] - t.centroid_offset[i]) * spacing[i]) ** 2 for i in range(3)) ** 0.5
            m += 1
    assert abs(err - total / m) < 1e-12
    assert acc == 1.0 - np.mean(pred_lab != labels)


def test_sample_metrics_rejects_empty_or_misaligned():
    with pytest.raises(ValueError):
        E.sample_metrics([], [], [])
    with pytest.raises(ValueError):
        E.sample_metrics([1, 2], [[0, 0, 0]] * 2, [SampleTarget(1)])


# identification -----------------------------------------------------------------

SPACING = (1.25, 1.0, 1.0)


def gt_set(entries):
    return AnnotationSet.from_voxels([k for k, _ in entries], [c for _, c in entries], SPACING)


def finals(entries):
    return {k: E.FinalPrediction(k, tuple(c), 1, 1.0) for k, c in entries}


def test_exact_predictions_identify_everything():
    entries = [(7, (20.0, 50.0, 40.0)), (8, (45.0, 52.0, 41.0)), (20, (90.0, 55.0, 44.0))]
    rep = E.identification_metrics(finals(entries), gt_set(entries), SPACING)
    assert rep["id_rate_all"] == 1.0 and rep["loc_mean_mm"] == 0.0
    assert rep["thoracic"]["id_rate"] == 1.0 and rep["lumbar"]["n"] == 1
    assert rep["cervical"]["id_rate"] is None


def test_prediction_beyond_threshold_is_missed():
    rep = E.identification_metrics(finals([(5, (20.0, 75.0, 40.0))]), gt_set([(5, (20.0, 50.0, 40.0))]), SPACING)
    assert rep["id_rate_all"] == 0.0
    assert abs(rep["loc_mean_mm"] - 25.0) < 1e-12


def test_mislabeled_prediction_is_missed():
    rep = E.identification_metrics(finals([(6, (20.0, 50.0, 40.0))]), gt_set([(5, (20.0, 50.0, 40.0))]), SPACING)
    assert rep["id_rate_all"] == 0.0
    assert rep["false_positive_labels"] == ["C7"]


def test_closer_wrong_label_blocks_identification():
    gt = gt_set([(10, (40.0, 50.0, 40.0)), (11, (80.0, 50.0, 40.0))])
    pred = finals([(10, (50.0, 50.0, 40.0)), (11, (42.0, 50.0, 40.0))])
    rows = E.match_vertebrae(pred, gt, SPACING)
    assert [r["identified"] for r in rows] == [False, False]


@given(st.floats(0, 60), st.floats(0, 60), st.integers(0, 10**6))
def test_rate_is_monotone_in_threshold(t1, t2, seed):
    rng = np.random.default_rng(seed)
    entries = [(k, tuple(rng.uniform(0, 200, 3))) for k in range(6)]
    pred = finals([(k, tuple(np.asarray(c) + rng.normal(0, 8, 3))) for k, c in entries])
    lo, hi = sorted((t1, t2))
    r_lo = E.identification_metrics(pred, gt_set(entries), SPACING, lo)["id_rate_all"]
    r_hi = E.identification_metrics(pred, gt_set(entries), SPACING, hi)["id_rate_all"]
    assert 0.0 <= r_lo <= r_hi <= 1.0


# whole-volume prediction ------------------------------------------------------------

def planted_fcn(a=10.0):
    """Hand-set FCN that reads a window's mean block maximum m and picks the
    label k whose level k + 1 is nearest m (m below 0.5 is background)."""
    params = build_cnn(0, CnnArch(channels=(1, 1, 1, 1), kernel=1, fc5=1))
    t = params.tensors
    for i in range(1, 5):
        t[f"conv{i}.w"][...] = 1.0
    t["fc5.w"][...] = 1.0 / 84
    levels = np.arange(1, 27, dtype=float)
    t["fc6_1.w"][:26, 0] = a * levels
    t["fc6_1.b"][:26] = -a * levels ** 2 / 2
    t["fc6_1.w"][26] = t["fc6_1.b"][26] = 0.0
    t["fc6_2.w"][...] = 0.0
    return convert_to_fcn(params)


def test_all_background_volume_gives_no_predictions():
    pred = E.predict_volume(planted_fcn(), None, Volume(np.zeros((1, 64, 112, 96), np.float32)))
    assert pred.cnn == {} and pred.rnn == {}
    assert pred.sequence_length == 0 and pred.diagnostic


def test_planted_slabs_are_all_recovered():
    labels = [5, 6, 7, 8]
    arr = np.zeros((1, 192, 112, 96), np.float32)
    for i, k in enumerate(labels):
        arr[0, 48 * i:48 * i + 48] = k + 1
    vol = Volume(arr, SPACING)
    gt = gt_set([(k, (48 * i + 24.0, 56.0, 48.0)) for i, k in enumerate(labels)])
    pred = E.predict_volume(planted_fcn(), None, vol)
    assert sorted(pred.cnn) == labels
    rep = E.identification_metrics(pred.cnn, gt, SPACING)
    assert rep["id_rate_all"] == 1.0
    assert rep["loc_mean_mm"] == 10.0  # window centres sit 8 slices from each slab centre
