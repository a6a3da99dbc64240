import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from spinemark.losses import (BACKGROUND, N_CLASSES, SampleTarget, identification_loss,
                              identification_loss_grad, localization_loss,
                              localization_loss_grad, multitask_loss, sequence_loss, smooth_l1,
                              smooth_l1_grad, total_loss)
from spinemark.tensor import softmax
from conftest import central_diff, rel_err


def bce_sum_direct(probs, label):
    """Per-class binary cross-entropy summed over classes, one term at a time."""
    total = 0.0
    for j, f in enumerate(probs):
        f = min(max(f, 1e-12), 1 - 1e-12)
        y = 1.0 if j == label else 0.0
        total -= y * math.log(f) + (1 - y) * math.log(1 - f)
    return total


def test_one_hot_prediction_has_zero_loss():
    p = np.zeros((1, N_CLASSES))
    p[0, 9] = 1.0
    assert identification_loss(p, [SampleTarget(9)]) < 1e-10


@pytest.mark.parametrize("label", [0, 13, BACKGROUND])
def test_uniform_prediction_value(label):
    uniform = [1.0 / 27] * 27
    direct = bce_sum_direct(uniform, label)
    closed = -math.log(1 / 27) - 26 * math.log(26 / 27)
    assert abs(direct - closed) < 1e-12
    got = identification_loss(np.array([uniform]), [SampleTarget(label)])
    assert abs(got - direct) < 1e-10


def test_identification_is_mean_over_samples(rng):
    p = softmax(rng.standard_normal((2, N_CLASSES)))
    t = [SampleTarget(3), SampleTarget(BACKGROUND)]
    a = identification_loss(p[:1], t[:1])
    b = identification_loss(p[1:], t[1:])
    assert abs(identification_loss(p, t) - (a + b) / 2) < 1e-12
    assert abs(a - bce_sum_direct(p[0], 3)) < 1e-12


def test_identification_rejects_bad_input():
    with pytest.raises(ValueError):
        identification_loss(np.zeros((0, N_CLASSES)), [])
    with pytest.raises(ValueError, match="probability"):
        identification_loss(np.full((1, N_CLASSES), 0.5), [SampleTarget(0)])


def test_identification_grad_finite_differences(rng):
    z = rng.standard_normal((3, N_CLASSES))
    t = [SampleTarget(1), SampleTarget(BACKGROUND), SampleTarget(20)]
    g = identification_loss_grad(z, t)
    f = lambda: identification_loss(softmax(z), t)
    for idx in [(0, 1), (0, 5), (1, 26), (2, 20), (2, 0)]:
        assert rel_err(central_diff(f, z, idx), g[idx]) < 1e-6


@given(z=hnp.arrays(np.float64, (2, N_CLASSES), elements=st.floats(-20, 20)),
       labels=st.lists(st.integers(0, N_CLASSES - 1), min_size=2, max_size=2))
def test_identification_loss_non_negative(z, labels):
    assert identification_loss(softmax(z), labels) >= 0.0


def test_smooth_l1_values():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(-3.0) == 2.5
    assert 0.5 * 1.0 ** 2 == 1.0 - 0.5 == smooth_l1(1.0) == smooth_l1(-1.0)


@given(x=st.floats(-1e3, 1e3))
def test_smooth_l1_even_and_monotone(x):
    assert smooth_l1(x) == smooth_l1(-x)
    assert smooth_l1(abs(x) * 1.01 + 1e-3) >= smooth_l1(x)


@given(x=st.floats(-5, 5).filter(lambda v: abs(abs(v) - 1) > 1e-4))
def test_smooth_l1_derivative(x):
    h = 1e-7
    fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h)
    assert abs(fd - float(smooth_l1_grad(x))) < 1e-6


def test_localization_all_background():
    t = [SampleTarget(BACKGROUND), SampleTarget(BACKGROUND)]
    assert localization_loss(np.ones((2, 3)), t) == (0.0, 0)
    assert not np.any(localization_loss_grad(np.ones((2, 3)), t))


def test_localization_single_positive():
    t = [SampleTarget(3, (16.0, 56.0, 48.0))]
    loss, m = localization_loss(np.array([[16.5, 58.0, 48.0]]), t)
    assert m == 1
    assert abs(loss - (0.125 + 1.5 + 0.0)) < 1e-15


def test_localization_exact_prediction():
    t = [SampleTarget(2, (1.0, 2.0, 3.0)), SampleTarget(5, (4.0, 5.0, 6.0))]
    assert localization_loss(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), t) == (0.0, 2)


@given(pert=hnp.arrays(np.float64, (3,), elements=st.floats(-1e6, 1e6)))
def test_background_predictions_are_masked(pert):
    t = [SampleTarget(4, (10.0, 50.0, 40.0)), SampleTarget(BACKGROUND), SampleTarget(7, (3.0, 9.0, 1.0))]
    pred = np.array([[9.0, 51.5, 40.2], [0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])
    before = localization_loss(pred, t)
    pred[1] += pert
    after = localization_loss(pred, t)
    assert before[0].hex() == after[0].hex() and before[1] == after[1]


def test_localization_grad_finite_differences(rng):
    pred = rng.normal(0, 2, (4, 3))
    t = [SampleTarget(1, (0.3, -1.0, 2.0)), SampleTarget(BACKGROUND),
         SampleTarget(2, (1.0, 1.0, 1.0)), SampleTarget(8, (-2.0, 0.0, 0.5))]
    g = localization_loss_grad(pred, t)
    f = lambda: localization_loss(pred, t)[0]
    for idx in np.ndindex(*pred.shape):
        assert rel_err(central_diff(f, pred, idx, 1e-6), g[idx]) < 1e-6


def test_total_loss_values():
    assert abs(total_loss(1.0, 2.0, 0.12) - 1.24) < 1e-15
    assert total_loss(0.7, 5.0, 0.0) == 0.7
    assert total_loss(0.7, 0.0, 0.3) == 0.7
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_sequence_loss_values():
    assert abs(sequence_loss([1, 1], [2, 2], 0.10) - 2.4) < 1e-15
    assert sequence_loss([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.5) == 0.0
    assert sequence_loss([0.8], [1.5], 0.1) == total_loss(0.8, 1.5, 0.1)
    with pytest.raises(ValueError):
        sequence_loss([1.0], [1.0, 2.0], 0.1)
    with pytest.raises(ValueError):
        sequence_loss([], [], 0.1)


@given(ids=st.lists(st.floats(0, 100), min_size=1, max_size=10), lam=st.floats(0, 2), data=st.data())
def test_sequence_loss_is_sum_of_step_totals(ids, lam, data):
    locs = data.draw(st.lists(st.floats(0, 100), min_size=len(ids), max_size=len(ids)))
    direct = sum(i + lam * l for i, l in zip(ids, locs))
    assert abs(sequence_loss(ids, locs, lam) - direct) <= 1e-12 * max(1.0, direct)


def test_multitask_report_consistent(rng):
    z = rng.standard_normal((3, N_CLASSES))
    off = rng.standard_normal((3, 3))
    t = [SampleTarget(0, (0.1, 0.2, 0.3)), SampleTarget(BACKGROUND), SampleTarget(12, (1.0, 0.0, 0.0))]
    rep, gz, go = multitask_loss(z, off, t, 0.12)
    assert abs(rep.total - (rep.id_loss + 0.12 * rep.loc_loss)) < 1e-12
    assert rep.positive_count == 2
    np.testing.assert_allclose(go, 0.12 * localization_loss_grad(off, t))
    np.testing.assert_allclose(gz, identification_loss_grad(z, t))


def test_sample_target_onehot():
    y = SampleTarget(5).onehot()
    assert y.sum() == 1.0 and y[5] == 1.0
    assert not SampleTarget(BACKGROUND).positive
