import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from robust_reid.errors import DegenerateBatch, ShapeMismatch
from robust_reid.losses import (discriminator_loss, encoder_confusion_loss, soft_cross_entropy,
                                triplet_hard)

T = torch.tensor
D = torch.float64


def test_soft_cross_entropy_cases():
    logits = torch.log(T([[0.7, 0.3]], dtype=D))
    assert soft_cross_entropy(logits, T([[1.0, 0.0]], dtype=D)).item() == pytest.approx(-math.log(0.7))
    assert soft_cross_entropy(torch.zeros(1, 2, dtype=D), T([[0.5, 0.5]], dtype=D)).item() == \
        pytest.approx(math.log(2))
    with pytest.raises(ShapeMismatch):
        soft_cross_entropy(torch.zeros(2, 3), torch.zeros(2, 4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 1000))
def test_gibbs(logit_list, seed):
    logits = T([logit_list], dtype=D)
    p = torch.softmax(logits, 1)
    entropy = -(p * p.log()).sum().item()
    assert soft_cross_entropy(logits, p).item() == pytest.approx(entropy, abs=1e-12)
    q = torch.as_tensor(np.random.default_rng(seed).dirichlet(np.ones(len(logit_list)))[None], dtype=D)
    assert soft_cross_entropy(logits, q).item() >= -(q * q.log()).sum().item() - 1e-12


def test_triplet_hand_cases():
    # anchor at 0; positives at 1 and 2, negatives at 1.5 and 3
    f = T([[0.0], [1.0], [2.0], [1.5], [3.0]], dtype=D)
    per = triplet_hard(f, [0, 0, 0, 1, 1], 0.3, reduction="none")
    assert per[0].item() == pytest.approx(0.8, abs=1e-9)
    g = T([[0.0], [1.0], [2.0]], dtype=D)
    assert triplet_hard(g, [0, 0, 1], 0.3, reduction="none")[0].item() == pytest.approx(0.0, abs=1e-9)
    same = torch.zeros(4, 3, dtype=D)
    assert triplet_hard(same, [0, 0, 1, 1]).item() == pytest.approx(0.3, abs=1e-9)


def test_triplet_degenerate():
    with pytest.raises(DegenerateBatch):
        triplet_hard(torch.zeros(2, 3), [4, 4])
    with pytest.raises(DegenerateBatch):
        triplet_hard(torch.zeros(3, 3), [1, 2, 3])


def test_triplet_gradient_finite_at_duplicates():
    f = torch.zeros(4, 3, dtype=D, requires_grad=True)
    (g,) = torch.autograd.grad(triplet_hard(f, [0, 0, 1, 1]), f)
    assert torch.isfinite(g).all()


def test_discriminator_game():
    half = torch.full((3,), 0.5, dtype=D)
    assert discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2))
    assert encoder_confusion_loss(half, half).item() == pytest.approx(-2 * math.log(2))
    c, a = T([0.9], dtype=D), T([0.1], dtype=D)
    assert discriminator_loss(c, a).item() == pytest.approx(-2 * math.log(0.9))
    assert encoder_confusion_loss(c, a).item() == pytest.approx(2 * math.log(0.9))
    assert discriminator_loss(T([1 - 1e-12], dtype=D), T([1e-12], dtype=D)).item() == \
        pytest.approx(0.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-7, 1 - 1e-7), min_size=1, max_size=8),
       st.lists(st.floats(1e-7, 1 - 1e-7), min_size=1, max_size=8))
def test_encoder_loss_is_negation(pc, pa):
    c, a = T(pc, dtype=D), T(pa, dtype=D)
    assert abs((discriminator_loss(c, a) + encoder_confusion_loss(c, a)).item()) <= 1e-12
