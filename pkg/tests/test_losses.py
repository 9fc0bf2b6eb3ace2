import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contextstrip.autodiff import Tensor, backward, grad_check, ops, precision
from contextstrip.losses import (
    LossConfig,
    boundary_weight_map,
    class_presence_labels,
    combine,
    cross_entropy_loss,
    dice_loss,
    dice_terms,
    one_hot,
    sec_loss,
    total_loss,
)


def softmax_probs(rng, shape):
    z = rng.normal(size=shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(sec_weight=-0.1)
    with pytest.raises(ValueError):
        LossConfig(classes=1)
    with pytest.raises(ValueError):
        LossConfig(boundary_sigma=0.0)


def test_one_hot_and_range():
    t = one_hot(np.array([[[0, 1], [1, 0]]]), 2)
    assert t.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(t[0, 1], [[0, 1], [1, 0]])
    with pytest.raises(ValueError, match="labels"):
        one_hot(np.array([[[2]]]), 2)


def test_non_one_hot_target_rejected():
    probs = Tensor(np.full((1, 2, 2, 2), 0.5))
    bad = np.zeros((1, 2, 2, 2))
    with pytest.raises(ValueError, match="one-hot"):
        cross_entropy_loss(probs, bad)
    with pytest.raises(ValueError, match="shape"):
        dice_terms(probs, np.zeros((1, 3, 2, 2)))


def test_cross_entropy_matches_numpy():
    rng = np.random.default_rng(0)
    with precision("float64"):
        p = softmax_probs(rng, (2, 3, 5, 4))
        target = one_hot(rng.integers(0, 3, size=(2, 5, 4)), 3)
        w = rng.uniform(0.5, 3.0, size=(2, 5, 4))
        expected = -(w[:, None] * target * np.log(p)).sum() / (2 * 5 * 4)
        assert cross_entropy_loss(Tensor(p), target, w).item() == pytest.approx(expected, rel=1e-12)


def test_weight_map_validation():
    p, t = Tensor(np.full((1, 2, 2, 2), 0.5)), one_hot(np.zeros((1, 2, 2), int), 2)
    with pytest.raises(ValueError, match="weight map must be"):
        cross_entropy_loss(p, t, np.ones((2, 2)))
    with pytest.raises(ValueError, match="positive"):
        cross_entropy_loss(p, t, np.zeros((1, 2, 2)))


def test_uniform_weight_scales_linearly():
    rng = np.random.default_rng(1)
    with precision("float64"):
        p = Tensor(softmax_probs(rng, (1, 2, 4, 4)))
        t = one_hot(rng.integers(0, 2, size=(1, 4, 4)), 2)
        base = cross_entropy_loss(p, t).item()
        assert cross_entropy_loss(p, t, np.full((1, 4, 4), 3.0)).item() == pytest.approx(3.0 * base, rel=1e-13)


def test_dice_example_and_extremes():
    with precision("float64"):
        pred = np.zeros((1, 2, 1, 4))
        pred[0, 1, 0, :3] = 1.0
        pred[0, 0] = 1.0 - pred[0, 1]
        truth = one_hot(np.array([[[1, 1, 0, 0]]]), 2)
        # foreground: 2 overlap, 3 predicted, 2 true -> -4/5
        assert dice_terms(Tensor(pred), truth).data[1] == pytest.approx(-0.8, abs=1e-6)
        assert dice_loss(Tensor(truth), truth).item() == pytest.approx(-1.0, abs=1e-6)
        disjoint = one_hot(np.array([[[0, 0, 1, 1]]]), 2)
        np.testing.assert_allclose(dice_terms(Tensor(truth), disjoint).data, 0.0, atol=1e-12)


def test_dice_pools_over_batch():
    rng = np.random.default_rng(2)
    with precision("float64"):
        p = softmax_probs(rng, (3, 2, 4, 4))
        t = one_hot(rng.integers(0, 2, size=(3, 4, 4)), 2)
        num = (p * t).sum(axis=(0, 2, 3))
        den = (p ** 2).sum(axis=(0, 2, 3)) + (t ** 2).sum(axis=(0, 2, 3)) + 1e-7
        np.testing.assert_allclose(dice_terms(Tensor(p), t).data, -2 * num / den, rtol=1e-12)


def test_sec_loss_examples():
    with precision("float64"):
        assert sec_loss(Tensor([[0.5, 0.5]]), [[1.0, 1.0]]).item() == pytest.approx(math.log(2.0), abs=1e-12)
        q = np.array([[0.9, 0.2], [0.3, 0.6]])
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = -np.mean(y * np.log(q) + (1 - y) * np.log(1 - q))
        assert sec_loss(Tensor(q), y).item() == pytest.approx(expected, rel=1e-12)
        with pytest.raises(ValueError, match="presence"):
            sec_loss(Tensor(q), [[1.0, 0.0]])


def test_combine_and_total():
    with precision("float64"):
        assert combine(Tensor(0.5), Tensor(-0.8), Tensor(0.7), 0.1).item() == pytest.approx(-0.23, abs=1e-12)
        labels = np.zeros((2, 4, 4), int)
        labels[:, 1:3, 1:3] = 1
        labels[1] = 0
        target = one_hot(labels, 2)
        presence = class_presence_labels(labels, 2)
        np.testing.assert_array_equal(presence, [[1, 1], [1, 0]])
        out = total_loss(Tensor(target), Tensor(presence), target, presence, LossConfig())
        assert out.ce.item() == pytest.approx(0.0, abs=1e-10)
        assert out.sec.item() == pytest.approx(0.0, abs=1e-10)
        assert out.dice.item() == pytest.approx(-1.0, abs=1e-6)
        vals = out.values()
        assert vals["total"] == pytest.approx(vals["ce"] + vals["dice"] + 0.1 * vals["sec"], abs=1e-12)


def test_total_uses_boundary_map_when_enabled():
    rng = np.random.default_rng(3)
    with precision("float64"):
        labels = np.zeros((1, 16, 16), int)
        labels[0, 4:12, 4:12] = 1
        t = one_hot(labels, 2)
        p = Tensor(softmax_probs(rng, (1, 2, 16, 16)))
        q = Tensor(np.full((1, 2), 0.5))
        presence = class_presence_labels(labels, 2)
        plain = total_loss(p, q, t, presence, LossConfig()).ce.item()
        cfg = LossConfig(boundary_weight=10.0, boundary_sigma=5.0)
        weighted = total_loss(p, q, t, presence, cfg).ce.item()
        explicit = cross_entropy_loss(p, t, boundary_weight_map(labels[0], 10.0, 5.0)[None]).item()
        assert weighted == pytest.approx(explicit, rel=1e-12)
        assert weighted > plain


def test_boundary_weight_map_values():
    mask = np.zeros((9, 9), int)
    mask[3:6, 3:6] = 1
    w = boundary_weight_map(mask, w0=10.0, sigma=5.0)
    # pixels on either side of the edge are at distance 1
    assert w[3, 4] == pytest.approx(1 + 10 * math.exp(-1 / 50))
    assert w[0, 0] < w[2, 4]
    np.testing.assert_array_equal(boundary_weight_map(np.zeros((4, 4))), 1.0)


def test_class_presence_single_slice():
    np.testing.assert_array_equal(class_presence_labels(np.zeros((3, 3), int), 2), [1, 0])
    with pytest.raises(ValueError):
        class_presence_labels(np.full((2, 2), 3), 2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        logits = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        raw_q = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        labels = rng.integers(0, 2, size=(2, 4, 4))
        target = one_hot(labels, 2)
        presence = class_presence_labels(labels, 2)
        w = rng.uniform(1.0, 2.0, size=(2, 4, 4))

        def build(p):
            probs = ops.softmax(p["logits"], axis=1)
            return total_loss(probs, ops.sigmoid(p["q"]), target, presence, LossConfig(), w).total

        assert grad_check(build, {"logits": logits, "q": raw_q}, samples=16, rng=rng) < 1e-6


def test_dice_gradient_closed_form():
    rng = np.random.default_rng(4)
    with precision("float64"):
        p = Tensor(softmax_probs(rng, (1, 2, 3, 3)), requires_grad=True)
        t = one_hot(rng.integers(0, 2, size=(1, 3, 3)), 2)
        loss = ops.sum(dice_terms(p, t))
        backward(loss)
        num = (p.data * t).sum(axis=(0, 2, 3))
        den = (p.data ** 2).sum(axis=(0, 2, 3)) + t.sum(axis=(0, 2, 3)) + 1e-7
        expected = -2 * (t * den[None, :, None, None] - 2 * p.data * num[None, :, None, None]) / den[None, :, None, None] ** 2
        np.testing.assert_allclose(p.grad, expected, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-4, 4)), st.integers(0, 2 ** 9 - 1))
def test_dice_terms_bounded(z, bits):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    labels = np.array([(bits >> i) & 1 for i in range(9)]).reshape(1, 3, 3)
    with precision("float64"):
        terms = dice_terms(Tensor(p), one_hot(labels, 2)).data
    assert np.all(terms <= 0.0) and np.all(terms >= -1.0)
