import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from loco.pseudo import (CdfConfig, ClassConfidence, ThresholdState, class_confidence,
                         effective_threshold, filter_pseudo_labels, fixed_threshold,
                         threshold_columns, update_thresholds, utilization, write_threshold_rows)
from loco.types import IGNORE, DegenerateStateError


def probs_from(rows, shape):
    """Build a [1, K, H, W] map from per-pixel probability rows in row-major order."""
    a = torch.tensor(rows, dtype=torch.float64)
    return a.T.reshape(1, a.shape[1], *shape)


def brute_force_filter(probs: np.ndarray, thresholds) -> np.ndarray:
    """Per-pixel reference: first maximal class, kept iff its probability >= its threshold."""
    _, k, h, w = probs.shape
    out = np.empty((probs.shape[0], h, w), dtype=np.int64)
    for b in range(probs.shape[0]):
        for i in range(h):
            for j in range(w):
                best, best_p = 0, probs[b, 0, i, j]
                for c in range(1, k):
                    if probs[b, c, i, j] > best_p:
                        best, best_p = c, probs[b, c, i, j]
                out[b, i, j] = best if best_p >= thresholds[best] else IGNORE
    return out


# ---------------------------------------------------------------- class confidence

def test_class_confidence_two_pixels_mean():
    probs = probs_from([[0.05, 0.9, 0.05], [0.1, 0.8, 0.1]], (1, 2))
    conf = class_confidence(probs)
    assert conf.alpha_local[1] == pytest.approx(0.85, abs=1e-12)
    assert conf.present.tolist() == [False, True, False]
    assert np.isnan(conf.alpha_local[0]) and np.isnan(conf.alpha_local[2])
    assert conf.alpha_global == pytest.approx(0.85, abs=1e-12)


def test_class_confidence_singleton():
    conf = class_confidence(probs_from([[0.2, 0.1, 0.7]], (1, 1)))
    assert conf.alpha_local[2] == pytest.approx(0.7)


def test_global_confidence_is_macro_average():
    # class 0: one pixel at 0.6; class 1: three pixels at 0.9
    rows = [[0.6, 0.4], [0.1, 0.9], [0.1, 0.9], [0.1, 0.9]]
    conf = class_confidence(probs_from(rows, (2, 2)))
    assert conf.alpha_global == pytest.approx((0.6 + 0.9) / 2)


def test_absent_class_is_skipped_by_update():
    cfg = CdfConfig(num_classes=3, ema_lambda=0.5)
    state = ThresholdState(0.85, np.array([0.2, 0.3, 0.4]), 0)
    conf = class_confidence(probs_from([[0.9, 0.05, 0.05]], (1, 1)))
    new = update_thresholds(state, conf, cfg)
    assert new.t_local[1] == 0.3 and new.t_local[2] == 0.4
    assert new.t_local[0] == pytest.approx(0.5 * 0.2 + 0.5 * 0.9)
    assert new.step == 1


# ---------------------------------------------------------------- EMA updates

def _conf(local, glob):
    local = np.asarray(local, dtype=float)
    return ClassConfidence(local, ~np.isnan(local), glob)


def test_initial_state():
    s = ThresholdState.initial(CdfConfig(num_classes=4))
    assert s.t_global == 0.85
    np.testing.assert_array_equal(s.t_local, np.full(4, 0.25))
    assert s.step == 0


def test_lambda_one_keeps_state():
    state = ThresholdState(0.85, np.array([0.3, 0.4]), 3)
    new = update_thresholds(state, _conf([0.9, 0.7], 0.8), CdfConfig(2, ema_lambda=1.0))
    assert new.t_global == 0.85
    np.testing.assert_array_equal(new.t_local, [0.3, 0.4])


def test_lambda_zero_takes_batch_values():
    state = ThresholdState(0.85, np.array([0.3, 0.4]), 3)
    new = update_thresholds(state, _conf([0.9, 0.7], 0.8), CdfConfig(2, ema_lambda=0.0))
    assert new.t_global == 0.8
    np.testing.assert_array_equal(new.t_local, [0.9, 0.7])


def test_global_ema_hand_case():
    state = ThresholdState(0.85, np.array([0.5, 0.5]), 0)
    new = update_thresholds(state, _conf([0.95, 0.95], 0.95), CdfConfig(2, ema_lambda=0.9))
    assert new.t_global == pytest.approx(0.86, abs=1e-12)


def test_update_does_not_mutate_input():
    state = ThresholdState(0.85, np.array([0.5, 0.5]), 0)
    update_thresholds(state, _conf([0.9, 0.9], 0.9), CdfConfig(2, ema_lambda=0.5))
    np.testing.assert_array_equal(state.t_local, [0.5, 0.5])


def test_fixed_point_converges_geometrically():
    cfg = CdfConfig(2, ema_lambda=0.9)
    state = ThresholdState(0.85, np.array([0.5, 0.5]), 0)
    g = 0.6
    for t in range(1, 60):
        state = update_thresholds(state, _conf([g, g], g), cfg)
        assert abs(state.t_global - g) == pytest.approx(0.25 * 0.9 ** t, rel=1e-9)


# ---------------------------------------------------------------- effective threshold

def test_equal_locals_give_global():
    s = ThresholdState(0.8, np.array([0.4, 0.4, 0.4]))
    np.testing.assert_allclose(effective_threshold(s, CdfConfig(3)), 0.8, atol=1e-15)


def test_gamma_zero_gives_global():
    s = ThresholdState(0.8, np.array([0.9, 0.1, 0.3]))
    np.testing.assert_allclose(effective_threshold(s, CdfConfig(3, gamma=0.0)), 0.8, atol=1e-15)


def test_hand_case():
    s = ThresholdState(0.8, np.array([0.9, 0.45]))
    out = effective_threshold(s, CdfConfig(2, gamma=0.25))
    expected = [0.8, 0.8 * math.exp(0.25 * math.log(0.45 / 0.9))]
    np.testing.assert_allclose(out, expected, atol=1e-9)
    assert out[1] == pytest.approx(0.6727, abs=1e-4)


def test_all_zero_locals_are_degenerate():
    with pytest.raises(DegenerateStateError):
        effective_threshold(ThresholdState(0.8, np.zeros(3)), CdfConfig(3))


@settings(max_examples=200, deadline=None)
@given(t_global=st.floats(0.01, 1.0),
       t_local=st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6),
       gamma=st.floats(0.0, 3.0))
def test_dominance_property(t_global, t_local, gamma):
    s = ThresholdState(t_global, np.array(t_local))
    out = effective_threshold(s, CdfConfig(len(t_local), gamma=gamma))
    assert np.all(out <= t_global + 1e-15)
    assert out[int(np.argmax(t_local))] == t_global


# ---------------------------------------------------------------- filtering

def test_confident_pixel_kept():
    probs = probs_from([[0.97, 0.02, 0.01]], (1, 1))
    assert filter_pseudo_labels(probs, [0.9, 0.9, 0.9]).item() == 0


def test_uniform_pixel_ignored():
    probs = probs_from([[1 / 3, 1 / 3, 1 / 3]], (1, 1))
    assert filter_pseudo_labels(probs, [0.34, 0.34, 0.34]).item() == IGNORE


def test_zero_thresholds_keep_everything():
    gen = torch.Generator().manual_seed(0)
    probs = torch.randn(2, 3, 5, 5, generator=gen).softmax(1)
    assert (filter_pseudo_labels(probs, [0, 0, 0]) != IGNORE).all()


def test_threshold_is_inclusive():
    probs = probs_from([[0.25, 0.75]], (1, 1))
    assert filter_pseudo_labels(probs, [0.9, 0.75]).item() == 1


def test_tie_goes_to_lowest_class():
    probs = probs_from([[0.1, 0.45, 0.45]], (1, 1))
    assert filter_pseudo_labels(probs, [0, 0, 0]).item() == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 4), h=st.integers(1, 16), w=st.integers(1, 16),
       thr=st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_filter_matches_brute_force(seed, k, h, w, thr):
    gen = torch.Generator().manual_seed(seed)
    probs = (torch.randn(2, k, h, w, generator=gen, dtype=torch.float64) * 2).softmax(1)
    np.testing.assert_array_equal(filter_pseudo_labels(probs, thr[:k]).numpy(),
                                  brute_force_filter(probs.numpy(), thr[:k]))


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.34, 0.98), bump=st.floats(0.0, 0.5), thr=st.floats(0.0, 1.0))
def test_monotonicity(p, bump, thr):
    rest = (1 - p) / 2
    low = probs_from([[rest, p, rest]], (1, 1))
    q = min(p + bump, 1.0)
    rest2 = (1 - q) / 2
    high = probs_from([[rest2, q, rest2]], (1, 1))
    t = [thr] * 3
    if filter_pseudo_labels(low, t).item() != IGNORE:
        assert filter_pseudo_labels(high, t).item() == 1


# ---------------------------------------------------------------- utilization

def test_utilization_counting():
    ref = torch.tensor([[[1, 1, 1, 1, 0, 2]]])
    pseudo = torch.tensor([[[1, 1, IGNORE, 1, 0, IGNORE]]])
    u = utilization(pseudo, ref, 3)
    assert u[1] == 0.75 and u[0] == 1.0 and u[2] == 0.0


def test_utilization_extremes():
    gen = torch.Generator().manual_seed(1)
    probs = torch.randn(2, 3, 6, 6, generator=gen).softmax(1)
    ref = probs.argmax(1)
    all_kept = utilization(filter_pseudo_labels(probs, [0, 0, 0]), ref, 3)
    none_kept = utilization(filter_pseudo_labels(probs, fixed_threshold(3, 1.0 + 1e-6)), ref, 3)
    present = np.bincount(ref.flatten().numpy(), minlength=3) > 0
    np.testing.assert_array_equal(all_kept[present], 1.0)
    np.testing.assert_array_equal(none_kept[present], 0.0)


def test_utilization_absent_class_is_nan():
    ref = torch.zeros(1, 2, 2, dtype=torch.long)
    u = utilization(ref.clone(), ref, 3)
    assert u[0] == 1.0 and np.isnan(u[1]) and np.isnan(u[2])


def test_threshold_csv_columns(tmp_path):
    path = tmp_path / "t.csv"
    write_threshold_rows(path, [{"epoch": 1, "t_global": 0.8, "T_0": 0.8, "util_1": float("nan")}], 2)
    header, row = path.read_text().splitlines()
    assert header.split(",") == threshold_columns(2)
    assert header == ("epoch,t_global,t_local_0,t_local_1,T_0,T_1,util_0,util_1,"
                      "util_fixed_0,util_fixed_1")
    assert row.split(",")[:2] == ["1", "0.8"]
