from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tumorburden.loss import (
    CLASSES,
    alpha,
    class_loss,
    confidence_weighted_loss,
    confidence_weighted_loss_arrays,
    cross_entropy_loss,
    parse_confidences,
    soft_dice_loss,
)
from tumorburden.nifti import ProbabilityVolume
from tumorburden.volume import LabelVolume, Spacing

probs = arrays(np.float64, (3, 3, 3, 2), elements=st.floats(0.01, 0.99))
binary = arrays(np.float64, (3, 3, 3, 2), elements=st.sampled_from([0.0, 1.0]))
levels = st.dictionaries(st.sampled_from(CLASSES), st.integers(1, 4))


def central_difference(fn, p, h=1e-4):
    out = np.empty_like(p)
    for idx in np.ndindex(p.shape):
        up, down = p.copy(), p.copy()
        up[idx] += h
        down[idx] -= h
        out[idx] = (fn(up) - fn(down)) / (2 * h)
    return out


def max_rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))


class TestAlpha:
    def test_mapping(self):
        assert alpha(1) == 0.5 and alpha(2) == 0.75 and alpha(3) == 1.25 and alpha(4) == 1.5
        assert alpha(None) == 1.0

    @pytest.mark.parametrize("level", [0, 5, -1, True, 2.5])
    def test_out_of_range(self, level):
        with pytest.raises(ValueError):
            alpha(level)

    def test_parse(self):
        assert parse_confidences("et=4,ed=3") == {"et": 4, "ed": 3}
        assert parse_confidences("ET=1; cavity=2") == {"et": 1, "cavity": 2}
        assert parse_confidences(None) == {} and parse_confidences("") == {}
        for bad in ("et=5", "necrosis=2", "et"):
            with pytest.raises(ValueError):
                parse_confidences(bad)


class TestSoftDice:
    def test_perfect(self, rng):
        gt = (rng.random((4, 4, 4)) < 0.5).astype(float)
        value, _ = soft_dice_loss(gt, gt)
        assert 0.0 <= value < 1e-6

    def test_zero_prediction(self):
        gt = np.zeros((3, 3, 3))
        gt[1, 1, 1] = 1.0
        value, _ = soft_dice_loss(np.zeros_like(gt), gt)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_squared_norm_denominator(self):
        p = np.array([0.5, 0.5, 0.0])
        g = np.array([1.0, 0.0, 0.0])
        value, _ = soft_dice_loss(p, g)
        assert value == pytest.approx(1.0 - 2 * 0.5 / (0.5 + 1.0 + 1e-7), abs=1e-15)

    def test_gradient(self, rng):
        for _ in range(10):
            p, g = rng.uniform(0.0, 1.0, (4, 4, 4)), (rng.random((4, 4, 4)) < 0.3).astype(float)
            _, grad = soft_dice_loss(p, g)
            assert max_rel(grad, central_difference(lambda q: soft_dice_loss(q, g)[0], p)) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestCrossEntropy:
    def test_exact_match_is_clamp_bounded(self):
        g = np.array([0.0, 1.0, 1.0, 0.0])
        value, grad = cross_entropy_loss(g, g)
        assert 0.0 < value <= -math.log(1 - 1e-7) + 1e-15
        assert not grad.any()

    def test_half(self):
        value, _ = cross_entropy_loss(np.full(10, 0.5), (np.arange(10) % 2).astype(float))
        assert value == pytest.approx(math.log(2), rel=1e-14)

    def test_gradient(self, rng):
        for _ in range(10):
            p, g = rng.uniform(0.05, 0.95, (4, 4, 4)), (rng.random((4, 4, 4)) < 0.5).astype(float)
            _, grad = cross_entropy_loss(p, g)
            assert max_rel(grad, central_difference(lambda q: cross_entropy_loss(q, g)[0], p)) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(np.zeros(3), np.zeros(4))


class TestWeighted:
    def test_absent_confidences_give_plain_mean(self, rng):
        p = rng.uniform(0.05, 0.95, (3, 4, 4, 4))
        t = (rng.random((3, 4, 4, 4)) < 0.4).astype(float)
        r = confidence_weighted_loss_arrays(p, t)
        plain = np.mean([class_loss(p[c], t[c])[0] for c in range(3)])
        assert r.total == pytest.approx(plain, rel=1e-14)
        assert r.alphas == {"et": 1.0, "ed": 1.0, "cavity": 1.0}

    def test_confidence_3_to_4(self, rng):
        p = rng.uniform(0.05, 0.95, (3, 4, 4, 4))
        t = (rng.random((3, 4, 4, 4)) < 0.4).astype(float)
        lo = confidence_weighted_loss_arrays(p, t, {"ed": 3})
        hi = confidence_weighted_loss_arrays(p, t, {"ed": 4})
        u = lo.unweighted["ed"]
        assert hi.unweighted["ed"] == u
        assert (lo.per_class["ed"], hi.per_class["ed"]) == (1.25 * u, 1.5 * u)
        assert hi.per_class["ed"] / lo.per_class["ed"] == pytest.approx(1.5 / 1.25, rel=1e-15)
        assert hi.per_class["et"] == lo.per_class["et"] and hi.per_class["cavity"] == lo.per_class["cavity"]

    def test_gradient_vs_finite_differences(self, rng):
        p = rng.uniform(0.05, 0.95, (3, 4, 4, 4))
        t = (rng.random((3, 4, 4, 4)) < 0.4).astype(float)
        conf = {"et": 4, "cavity": 1}
        r = confidence_weighted_loss_arrays(p, t, conf)
        numeric = central_difference(lambda q: confidence_weighted_loss_arrays(q, t, conf).total, p)
        assert r.gradient.shape == p.shape
        assert max_rel(r.gradient, numeric) < 1e-5

    def test_from_volumes(self, rng):
        labels = rng.integers(0, 4, size=(4, 3, 2)).astype(np.uint8)
        gt = LabelVolume(labels, Spacing(1.0, 1.0, 2.0))
        channels = rng.uniform(0, 1, size=(3, 4, 3, 2))
        pv = ProbabilityVolume(channels, gt.spacing)
        r = confidence_weighted_loss(pv, gt, {"et": 2})
        targets = np.stack([labels == v for v in (1, 2, 3)]).astype(float)
        assert r.total == confidence_weighted_loss_arrays(channels, targets, {"et": 2}).total

    def test_errors(self):
        p = np.full((3, 2, 2), 0.5)
        with pytest.raises(ValueError):
            confidence_weighted_loss_arrays(p, np.zeros((3, 2, 3)))
        with pytest.raises(ValueError):
            confidence_weighted_loss_arrays(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            confidence_weighted_loss_arrays(p, np.zeros_like(p), {"necrosis": 2})
        with pytest.raises(ValueError):
            confidence_weighted_loss_arrays(p, np.zeros_like(p), {"et": 7})

    def test_volume_dims_mismatch(self):
        gt = LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8), Spacing(1.0, 1.0, 1.0))
        pv = ProbabilityVolume(np.zeros((3, 2, 2, 3)), gt.spacing)
        with pytest.raises(ValueError):
            confidence_weighted_loss(pv, gt)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(probs, binary, levels, st.sampled_from(CLASSES))
    def test_monotone_in_alpha(self, p, t, conf, name):
        base = confidence_weighted_loss_arrays(p, t, conf)
        if base.unweighted[name] <= 0 or conf.get(name) == 4:
            return
        level = conf.get(name)
        higher = dict(conf)
        # absent means 1.0; the next multiplier above it is level 3 (1.25)
        higher[name] = 3 if level is None else level + 1
        assert confidence_weighted_loss_arrays(p, t, higher).total > base.total

    @settings(max_examples=50, deadline=None)
    @given(probs, binary)
    def test_bounds(self, p, t):
        for c in range(3):
            sd, _ = soft_dice_loss(p[c], t[c])
            ce, _ = cross_entropy_loss(p[c], t[c])
            assert 0.0 <= sd <= 1.0 + 1e-6
            assert ce >= 0.0

    @settings(max_examples=30, deadline=None)
    @given(probs, binary, levels, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, p, t, conf, rnd):
        order = list(range(p[0].size))
        rnd.shuffle(order)
        shuffled_p = p.reshape(3, -1)[:, order].reshape(p.shape)
        shuffled_t = t.reshape(3, -1)[:, order].reshape(t.shape)
        a = confidence_weighted_loss_arrays(p, t, conf)
        b = confidence_weighted_loss_arrays(shuffled_p, shuffled_t, conf)
        assert b.total == pytest.approx(a.total, rel=1e-12)
        assert np.allclose(b.gradient.reshape(3, -1), a.gradient.reshape(3, -1)[:, order], rtol=1e-12, atol=0)
