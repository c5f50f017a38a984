import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from a2f import metrics as M

LIP = np.array([0, 1])
ALL4 = np.arange(4)


def cos_sin_pair(endpoint=False, amp=1e-3, n=100):
    t = np.linspace(0.0, 2 * np.pi, n) if endpoint else np.arange(n) * 2 * np.pi / n
    pred, gt = np.zeros((n, 4, 3)), np.zeros((n, 4, 3))
    pred[:, :, 0] = amp * np.cos(t)[:, None]
    gt[:, :, 0] = amp * np.sin(t)[:, None]
    return pred, gt


def test_identical_sequences_are_zero(rng):
    x = rng.standard_normal((5, 4, 3))
    assert M.lve(x, x, LIP) == M.mve(x, x) == M.ufve(x, x, ALL4) == M.fdd(x, x, ALL4) == M.lvd(x, x, LIP) == 0.0


def test_lve_single_vertex_offset():
    gt = np.zeros((6, 4, 3))
    pred = gt.copy()
    pred[:, 1, 0] = 0.001
    assert M.lve(pred, gt, LIP) == pytest.approx(1e-6, abs=1e-18)


def test_lve_two_frame_hand_case():
    gt = np.zeros((2, 2, 3))
    pred = gt.copy()
    pred[0, 0, 0], pred[0, 1, 1] = 0.002, 0.001  # max 4e-6
    pred[1, 1, 2] = 0.001  # max 1e-6
    assert abs(M.lve(pred, gt, LIP) - 2.5e-6) < 1e-12


def test_mve_uniform_millimetre():
    gt = np.zeros((3, 4, 3))
    pred = gt + np.array([0.0, 0.001, 0.0])
    assert abs(M.mve(pred, gt) - 1e-3) < 1e-12
    assert M.ufve(pred, gt, ALL4) == M.mve(pred, gt)


def test_lvd_two_millimetres():
    gt = np.zeros((4, 4, 3))
    pred = gt.copy()
    pred[:, 0, 2] = 0.002
    assert abs(M.lvd(pred, gt, LIP) - 2e-3) < 1e-12


def test_fdd_sign_semantics():
    t = np.arange(20)
    gt = np.zeros((20, 4, 3))
    gt[:, :, 1] = 0.001 * np.sin(t)[:, None]
    assert M.fdd(np.zeros_like(gt), gt, ALL4) < 0
    assert M.fdd(gt, np.zeros_like(gt), ALL4) > 0


def test_fdd_cos_sin_full_period():
    pred, gt = cos_sin_pair()
    ufve = M.ufve(pred, gt, ALL4)
    assert ufve > 0
    assert abs(M.fdd(pred, gt, ALL4)) < 1e-3 * ufve


def test_fdd_cos_sin_with_repeated_endpoint():
    # the duplicated t = 0 / 2pi sample biases cos only; value frozen from an independent loop oracle
    pred, gt = cos_sin_pair(endpoint=True)
    assert M.fdd(pred, gt, ALL4) == pytest.approx(-4.6794256753236035e-06, rel=1e-9)
    assert M.ufve(pred, gt, ALL4) == pytest.approx(9.013225025653187e-04, rel=1e-9)


def test_errors():
    with pytest.raises(M.MetricError):
        M.lve(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)), LIP)
    with pytest.raises(M.MetricError, match="empty"):
        M.lve(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), [])
    with pytest.raises(M.MetricError, match="empty"):
        M.ufve(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), [])
    with pytest.raises(M.MetricError, match="two frames"):
        M.fdd(np.zeros((1, 3, 3)), np.zeros((1, 3, 3)), LIP)
    with pytest.raises(M.MetricError):
        M.motion_std_map([])


def test_lve_equals_lvd_squared_per_frame(rng):
    pred, gt = rng.standard_normal((1, 5, 3)), rng.standard_normal((1, 5, 3))
    assert M.lve(pred, gt, LIP) == pytest.approx(M.lvd(pred, gt, LIP) ** 2, rel=1e-12)
    pred, gt = rng.standard_normal((7, 5, 3)), rng.standard_normal((7, 5, 3))
    rep = M.evaluate_sequence(pred, gt, LIP, ALL4)
    per_frame_max = np.linalg.norm(pred[:, LIP] - gt[:, LIP], axis=-1).max(axis=1)
    np.testing.assert_allclose(rep.frame_errors, per_frame_max ** 2, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(pred=arrays(np.float64, (4, 5, 3), elements=st.floats(-1, 1)),
       gt=arrays(np.float64, (4, 5, 3), elements=st.floats(-1, 1)))
def test_mean_of_squares_dominates(pred, gt):
    assert M.lve(pred, gt, LIP) >= M.lvd(pred, gt, LIP) ** 2 - 1e-12


@settings(max_examples=40, deadline=None)
@given(pred=arrays(np.float64, (3, 4, 3), elements=st.floats(-1, 1)),
       shift=arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_translation_invariance(pred, shift):
    gt = pred[::-1].copy()
    for f, args in ((M.lve, (LIP,)), (M.lvd, (LIP,)), (M.mve, ()), (M.ufve, (ALL4,)), (M.fdd, (ALL4,))):
        assert f(pred + shift, gt + shift, *args) == pytest.approx(f(pred, gt, *args), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(pred=arrays(np.float64, (3, 4, 3), elements=st.floats(-1, 1)),
       gt=arrays(np.float64, (3, 4, 3), elements=st.floats(-1, 1)))
def test_zero_only_when_equal(pred, gt):
    equal = np.array_equal(pred, gt)
    assert (M.mve(pred, gt) == 0) == equal
    if M.lve(pred, gt, ALL4) == 0 or M.ufve(pred, gt, ALL4) == 0 or M.lvd(pred, gt, ALL4) == 0:
        assert equal


def test_std_map_examples():
    static = np.ones((10, 3, 3))
    np.testing.assert_array_equal(M.motion_std_map([static, static]), np.zeros(3))
    seq = np.zeros((8, 3, 3))
    seq[1::2, 0, 0] = 0.002  # 0 / 2 mm relative to the first frame
    m = M.motion_std_map([seq])
    assert m.shape == (3,)
    assert m[0] == pytest.approx(1e-3, abs=1e-15) and m[1] == 0


def test_report_csv(tmp_path, rng):
    pred, gt = rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 4, 3))
    r = M.evaluate_sequence(pred, gt, LIP, ALL4, "vertex0", "val")
    M.write_report_csv(tmp_path / "r.csv", [r])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["metric", "value", "units", "convention", "split"]
    assert rows[1][:3] == ["lve", repr(r.lve), "m^2"] and rows[1][3:] == ["vertex0", "val"]
    assert len(rows) == 6
    M.write_std_map_csv(tmp_path / "s.csv", np.array([0.5, 0.25]))
    assert list(csv.reader(open(tmp_path / "s.csv"))) == [["vertex_index", "std_m"], ["0", "0.5"], ["1", "0.25"]]


def test_average_reports_is_sequence_mean(rng):
    reps = [M.evaluate_sequence(rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 4, 3)), LIP, ALL4)
            for _ in range(3)]
    avg = M.average_reports(reps)
    assert avg.mve == pytest.approx(np.mean([r.mve for r in reps]))
    assert avg.frame_errors.size == 9
