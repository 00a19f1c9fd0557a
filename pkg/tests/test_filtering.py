import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from labelbank.filtering import (
    UPSAMPLE_THEN_FILTER, FilterMode, filter_and_upsample, holistic_filter, predict_labels,
)
from labelbank.tensorcore import ConfigError, ShapeError, Tensor, bilinear_upsample

import gradsuite

EPS = 1e-7


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def ref_filter(c, S, eps=EPS):
    out = np.empty_like(S)
    for idx in np.ndindex(*S.shape):
        p = min(max(sig(c[idx[0]]) * sig(S[idx]), eps), 1 - eps)
        out[idx] = math.log(p / (1 - p))
    return out


def F(c, S, eps=EPS):
    return holistic_filter(Tensor(np.asarray(c, float)), Tensor(np.asarray(S, float)), eps).data


def test_by_hand_value():
    assert F([0.0], [[[2.0]]])[0, 0, 0] == pytest.approx(-0.23954476622188492, abs=1e-12)


def test_matches_scalar_reference():
    rng = np.random.default_rng(0)
    c, S = rng.uniform(-6, 6, 3), rng.uniform(-8, 8, (3, 4, 5))
    np.testing.assert_allclose(F(c, S), ref_filter(c, S), atol=1e-10)


def test_saturated_bank_is_identity():
    S = np.random.default_rng(1).uniform(-10, 10, (3, 5, 5))
    assert np.abs(F([30.0] * 3, S) - S).max() < 1e-6


def test_negative_bank_hits_clamp():
    out = F([-30.0, 0.0], np.zeros((2, 2, 2)))
    assert out[0].max() <= math.log(EPS / (1 - EPS)) + 1e-9


def test_length_mismatch():
    with pytest.raises(ShapeError):
        F([1.0, 2.0], np.zeros((3, 1, 1)))


def test_mode_validation():
    with pytest.raises(ConfigError):
        FilterMode(order="sideways")
    with pytest.raises(ConfigError):
        FilterMode(eps=0.5)


@settings(max_examples=80)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-10, 10)), st.floats(-10, 10))
def test_suppression(S, margin):
    # class 0 is vetoed, class 1 confirmed and above the clamp floor
    S = S.copy()
    S[1] = np.maximum(S[1], math.log(2 * EPS / (1 - 2 * EPS)))
    out = F([-30.0, 30.0], S)
    assert (predict_labels(out) == 1).all()


@settings(max_examples=60)
@given(st.floats(-5, 5), st.floats(0.01, 2), st.floats(-5, 5))
def test_monotone_in_bank_and_map(c, d, s):
    base = F([c], [[[s]]])[0, 0, 0]
    assert F([c + d], [[[s]]])[0, 0, 0] > base
    assert F([c], [[[s + d]]])[0, 0, 0] > base


@settings(max_examples=60)
@given(arrays(np.float64, (1, 2, 4), elements=st.floats(-8, 8)), st.floats(-8, 8))
def test_within_class_order_preserved(S, c):
    out = F([c], S).ravel()
    flat = S.ravel()
    for i in range(flat.size):
        for j in range(flat.size):
            if flat[i] < flat[j]:
                assert out[i] <= out[j]


class TestFilterAndUpsample:
    def test_same_size_modes_agree(self):
        rng = np.random.default_rng(2)
        c, S = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(3, 4, 4)))
        a = filter_and_upsample(c, S, 4, 4).data
        b = filter_and_upsample(c, S, 4, 4, FilterMode(UPSAMPLE_THEN_FILTER)).data
        np.testing.assert_array_equal(a, holistic_filter(c, S).data)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_saturated_bank_is_plain_upsample(self):
        S = Tensor(np.random.default_rng(3).uniform(-5, 5, (2, 3, 3)))
        c = Tensor(np.full(2, 30.0))
        up = bilinear_upsample(S, 9, 7).data
        for mode in (FilterMode(), FilterMode(UPSAMPLE_THEN_FILTER)):
            assert np.abs(filter_and_upsample(c, S, 9, 7, mode).data - up).max() < 1e-6

    def test_orders_differ(self):
        c = np.array([0.0, 1.0])
        S = np.array([[[-4.0, 6.0]], [[2.0, -3.0]]])
        a = filter_and_upsample(Tensor(c), Tensor(S), 1, 3).data
        b = filter_and_upsample(Tensor(c), Tensor(S), 1, 3, FilterMode(UPSAMPLE_THEN_FILTER)).data
        # midpoint computed by hand: average of filtered ends vs filter of averaged ends
        f = ref_filter(c, S)
        mid_a = (f[:, 0, 0] + f[:, 0, 1]) / 2
        mid_b = ref_filter(c, S.mean(axis=2, keepdims=True))[:, 0, 0]
        np.testing.assert_allclose(a[:, 0, 1], mid_a, atol=1e-10)
        np.testing.assert_allclose(b[:, 0, 1], mid_b, atol=1e-10)
        assert np.abs(mid_a - mid_b).min() > 0.05

    def test_target_smaller_than_map(self):
        with pytest.raises(ShapeError):
            filter_and_upsample(Tensor([0.0]), Tensor(np.zeros((1, 4, 4))), 2, 4)


class TestPredictLabels:
    def test_dominant_channel(self):
        S = np.zeros((3, 2, 2))
        S[2] = 5.0
        assert (predict_labels(S) == 2).all()

    def test_tie_goes_low(self):
        assert predict_labels(np.array([[[1.0]], [[3.0]], [[3.0]]]))[0, 0] == 1

    def test_matches_scan(self):
        S = np.random.default_rng(4).integers(0, 3, size=(4, 6, 6)).astype(float)
        got = predict_labels(S)
        for i in range(6):
            for j in range(6):
                col = list(S[:, i, j])
                assert got[i, j] == col.index(max(col))


@pytest.mark.parametrize("name", ["holistic_filter", "filter_then_upsample", "upsample_then_filter"])
def test_filter_gradients(name):
    worst = max(gradsuite.run_case(name, s) for s in range(gradsuite.N_SEEDS))
    assert worst < gradsuite.TOL
