import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from recam.errors import ValidationError
from recam.losses import (
    LOG_FLOOR,
    SmoothingConfig,
    UncertaintyParams,
    classification_loss,
    cross_entropy,
    smooth_labels,
    uncertainty_combine,
)


def test_smooth_labels_worked_example():
    np.testing.assert_allclose(smooth_labels(1, 5, SmoothingConfig(0.1)), [0.02, 0.92, 0.02, 0.02, 0.02], atol=1e-12)
    np.testing.assert_array_equal(smooth_labels(0, 5, SmoothingConfig(0.0)), [1, 0, 0, 0, 0])


@pytest.mark.parametrize("label", [-1, 5, 1.5, True])
def test_smooth_labels_rejects_bad_label(label):
    with pytest.raises(ValidationError):
        smooth_labels(label)


def test_smoothing_alpha_bounds():
    with pytest.raises(ValidationError):
        SmoothingConfig(1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 4), st.floats(0, 0.79))
def test_smooth_labels_properties(label, alpha):
    v = smooth_labels(label, 5, SmoothingConfig(alpha))
    assert abs(v.sum() - 1) <= 1e-12
    assert abs(v.min() - alpha / 5) <= 1e-12
    # argmax survives while alpha < (K-1)/K
    assert int(np.argmax(v)) == label


def test_smooth_labels_tensor_matches_scalar():
    t = smooth_labels(torch.tensor([3, 0]), 5, SmoothingConfig(0.1))
    np.testing.assert_allclose(t[0].numpy(), smooth_labels(3), atol=1e-7)


def test_cross_entropy_cases():
    onehot = np.eye(5)[2]
    assert cross_entropy(onehot, onehot) == 0.0
    assert abs(cross_entropy(np.full(5, 0.2), onehot) - math.log(5)) <= 1e-12
    s = smooth_labels(1)
    entropy = -(0.92 * math.log(0.92) + 4 * 0.02 * math.log(0.02))
    assert abs(cross_entropy(s, s) - entropy) <= 1e-12


def test_cross_entropy_floor():
    # a zero score on the true class is clamped, giving -log(1e-12)
    assert abs(cross_entropy([0.0, 1.0, 0, 0, 0], np.eye(5)[0]) - (-math.log(LOG_FLOOR))) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5), st.integers(0, 4), st.floats(0, 0.5))
def test_cross_entropy_at_least_entropy(raw, label, alpha):
    scores = np.asarray(raw) / sum(raw)
    target = smooth_labels(label, 5, SmoothingConfig(alpha))
    assert cross_entropy(scores, target) >= cross_entropy(target, target) - 1e-12


def test_uncertainty_worked_examples():
    assert uncertainty_combine(2.0, 4.0, 0.0, 0.0) == 3.0
    assert abs(uncertainty_combine(2.0, 2.0, 1.0, 0.0) - (1 / math.e + 2)) <= 1e-12
    lv1 = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    uncertainty_combine(torch.tensor(2.0, dtype=torch.float64), 2.0, lv1, torch.tensor(0.0)).backward()
    assert abs(lv1.grad.item()) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 50), st.floats(-3, 3))
def test_uncertainty_minimizer_closed_form(loss1, lv2):
    # d/dlv1 = -L1/2 exp(-lv1) + 1 = 0  =>  sigma1^2 = L1 / 2
    best = math.log(loss1 / 2)
    f = lambda lv: uncertainty_combine(loss1, 1.0, lv, lv2)
    assert f(best) <= f(best + 1e-3) and f(best) <= f(best - 1e-3)
    # convexity along lv1: second difference is positive
    h = 0.1
    assert f(best + h) + f(best - h) - 2 * f(best) > 0


def test_uncertainty_module_is_trainable():
    p = UncertaintyParams()
    loss = p(torch.tensor(2.0), torch.tensor(4.0))
    assert loss.item() == pytest.approx(3.0)
    loss.backward()
    assert p.log_var1.grad.item() == pytest.approx(0.0)
    assert p.log_var2.grad.item() == pytest.approx(-1.0)


def test_no_smoothing_is_plain_cross_entropy_bitwise():
    torch.manual_seed(0)
    logits = torch.randn(4, 5)
    labels = torch.tensor([0, 3, 4, 1])
    assert torch.equal(classification_loss(logits, labels, 0.0), F.cross_entropy(logits, labels))


def test_smoothed_loss_matches_soft_target_definition():
    torch.manual_seed(1)
    logits = torch.randn(3, 5, dtype=torch.float64)
    labels = torch.tensor([2, 0, 4])
    got = classification_loss(logits, labels, 0.1)
    probs = torch.softmax(logits, -1).numpy()
    expected = np.mean([cross_entropy(p, smooth_labels(int(y))) for p, y in zip(probs, labels)])
    assert abs(got.item() - expected) <= 1e-12
