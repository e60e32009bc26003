import itertools
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gacd.attacks import (
    AttackBudget,
    OTConfig,
    feature_scatter_positive,
    pgd_attack,
    sinkhorn_distance,
    sinkhorn_from_cost,
)
from gacd.models import SmallCNN


def images(n=8, seed=0):
    return torch.rand(n, 3, 32, 32, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def cnn():
    torch.manual_seed(0)
    return SmallCNN(num_classes=3, width=4, feature_dim=16).eval()


def test_budget_validation():
    with pytest.raises(ValueError):
        AttackBudget(epsilon=1 / 255, step_size=2 / 255)
    with pytest.raises(ValueError):
        AttackBudget(steps=0)
    with pytest.raises(ValueError):
        AttackBudget(norm="l2")
    with pytest.raises(ValueError):
        OTConfig(reg=0)


def test_zero_budget_returns_input(cnn):
    x = images()
    y = torch.zeros(8, dtype=torch.long)
    out = pgd_attack(cnn, x, y, AttackBudget(epsilon=0.0, step_size=1e-3))
    assert torch.equal(out, x)


class Constant(nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], 3) + 0.0 * x.flatten(1).sum(1, keepdim=True)


def test_zero_gradient_leaves_input_unmoved():
    x = images(4)
    out = pgd_attack(Constant(), x, torch.zeros(4, dtype=torch.long),
                     AttackBudget(random_start=False))
    assert torch.equal(out, x)


class LinearScorer(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        return self.w * x.flatten(1)


def margin_loss(score, y):
    # pushes the score against the true class: class 1 wants a high score
    sign = 2.0 * y.double() - 1.0
    return -sign * score[:, 0]


@pytest.mark.parametrize("w", [2.5, -0.7])
@pytest.mark.parametrize("steps,alpha_frac", [(1, 1.0), (3, 1.0), (20, 1.0), (8, 0.25), (20, 0.1)])
def test_linear_scorer_matches_closed_form(w, steps, alpha_frac):
    eps = 8 / 255
    x = torch.tensor([0.0, 0.01, 0.3, 0.5, 0.9, 0.995, 1.0, 0.2], dtype=torch.float64)
    x = x.view(-1, 1, 1, 1)
    y = torch.tensor([0, 1, 0, 1, 0, 1, 1, 0])
    budget = AttackBudget(epsilon=eps, steps=steps, step_size=eps * alpha_frac, random_start=False)
    out = pgd_attack(LinearScorer(torch.tensor(w, dtype=torch.float64)), x, y, budget,
                     loss_fn=margin_loss)
    direction = -(2.0 * y.double() - 1.0) * np.sign(w)
    expected = (x + direction.view(-1, 1, 1, 1) * eps).clamp(0.0, 1.0)
    assert torch.equal(out, expected)


@settings(max_examples=15, deadline=None)
@given(st.one_of(st.just(0.0), st.floats(1e-6, 16 / 255)), st.integers(1, 5), st.booleans(),
       st.integers(0, 1000))
def test_pgd_stays_in_ball(eps, steps, rand, seed):
    torch.manual_seed(1)
    model = SmallCNN(3, width=4, feature_dim=8)
    x = images(4, seed)
    y = torch.tensor([0, 1, 2, 0])
    budget = AttackBudget(epsilon=eps, steps=steps, step_size=eps / 4 if eps else 1e-4,
                          random_start=rand)
    out = pgd_attack(model, x, y, budget, generator=torch.Generator().manual_seed(seed))
    # float32 images: the projected offset can exceed eps by one rounding step
    assert (out - x).abs().max() <= eps + 1e-6
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_pgd_deterministic_without_random_start(cnn):
    x = images()
    y = torch.arange(8) % 3
    budget = AttackBudget(steps=5, random_start=False)
    assert torch.equal(pgd_attack(cnn, x, y, budget), pgd_attack(cnn, x, y, budget))


def test_pgd_seeded_random_start_reproducible(cnn):
    x = images()
    y = torch.arange(8) % 3
    budget = AttackBudget(steps=3)
    a = pgd_attack(cnn, x, y, budget, generator=torch.Generator().manual_seed(4))
    b = pgd_attack(cnn, x, y, budget, generator=torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_pgd_raises_loss(cnn):
    x = images()
    y = torch.arange(8) % 3
    adv = pgd_attack(cnn, x, y, AttackBudget(epsilon=16 / 255, steps=10, random_start=False))
    with torch.no_grad():
        assert F.cross_entropy(cnn(adv), y) > F.cross_entropy(cnn(x), y)


class SqrtModel(nn.Module):
    """Infinite input gradient wherever the first pixel is exactly zero."""

    def forward(self, x):
        v = x.flatten(1)[:, :1].sqrt()
        return torch.cat([v, -v], dim=1)


def test_nonfinite_gradients_return_clean_input():
    x = torch.full((3, 1, 2, 2), 0.5)
    x[1, 0, 0, 0] = 0.0
    stats = Counter()
    out = pgd_attack(SqrtModel(), x, torch.zeros(3, dtype=torch.long),
                     AttackBudget(steps=2, random_start=False), stats=stats)
    assert stats["nonfinite_grad"] == 1
    assert torch.equal(out[1], x[1])
    assert not torch.equal(out[0], x[0])


# -- Sinkhorn -----------------------------------------------------------------

def unit_rows(n, d, seed=0):
    return F.normalize(torch.randn(n, d, generator=torch.Generator().manual_seed(seed),
                                   dtype=torch.float64), dim=1)


@pytest.mark.parametrize("n,d", [(4, 16), (16, 64), (32, 128)])
def test_self_distance_is_zero(n, d):
    a = unit_rows(n, d)
    assert 0.0 <= sinkhorn_distance(a, a).item() < 1e-6


def test_single_pair_is_one_minus_cosine():
    a = torch.tensor([[1.0, 2.0, 0.5]], dtype=torch.float64)
    b = torch.tensor([[-0.3, 1.0, 2.0]], dtype=torch.float64)
    expected = 1 - F.cosine_similarity(a, b).item()
    assert sinkhorn_distance(a, b).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_symmetric_and_nonnegative(seed):
    a, b = unit_rows(12, 32, seed), unit_rows(12, 32, seed + 50)
    dab, dba = sinkhorn_distance(a, b).item(), sinkhorn_distance(b, a).item()
    assert abs(dab - dba) < 1e-8
    assert dab >= -1e-10


def exact_ot_uniform(cost):
    """Brute force over permutation couplings (extreme points for uniform marginals)."""
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) / n for p in itertools.permutations(range(n)))


def test_two_by_two_hand_instance_approaches_exact():
    cost = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    exact = exact_ot_uniform(cost.numpy())
    assert exact == 0.0
    vals = [sinkhorn_from_cost(cost, OTConfig(reg=r)).item() for r in (1.0, 0.3, 0.1, 0.01)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert abs(vals[-1] - exact) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_small_random_instances_match_exact_ot(seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 2, size=(4, 4))
    exact = exact_ot_uniform(cost)
    got = sinkhorn_from_cost(torch.tensor(cost), OTConfig(reg=0.005, iterations=500)).item()
    assert got == pytest.approx(exact, abs=1e-2)


def test_sinkhorn_rejects_nonfinite():
    a = unit_rows(3, 4)
    b = a.clone()
    b[0, 0] = float("nan")
    with pytest.raises(ValueError):
        sinkhorn_distance(a, b)


# -- feature scattering -------------------------------------------------------

def test_feature_scatter_zero_budget(cnn):
    x = images()
    assert torch.equal(feature_scatter_positive(cnn.features, x, AttackBudget(epsilon=0.0,
                                                                               step_size=1e-3)), x)


def test_feature_scatter_constant_extractor():
    x = images(4)
    out = feature_scatter_positive(lambda z: torch.ones(z.shape[0], 5), x,
                                   AttackBudget(steps=7, random_start=False))
    assert torch.equal(out, x)


def test_feature_scatter_more_steps_more_distortion(cnn):
    x = images(8, seed=3)
    with torch.no_grad():
        clean = cnn.features(x)

    def distortion(steps):
        budget = AttackBudget(steps=steps, step_size=2 / 255)
        xp = feature_scatter_positive(cnn.features, x, budget,
                                      generator=torch.Generator().manual_seed(0))
        assert (xp - x).abs().max() <= budget.epsilon + 1e-8
        assert 0.0 <= xp.min() and xp.max() <= 1.0
        with torch.no_grad():
            return sinkhorn_distance(clean, cnn.features(xp)).item()

    d1, d7 = distortion(1), distortion(7)
    assert d7 > d1 > 0


def test_feature_scatter_restores_training_mode(cnn):
    cnn.train()
    feature_scatter_positive(cnn.features, images(2), AttackBudget(steps=1))
    assert cnn.training
    cnn.eval()
