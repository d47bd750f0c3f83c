from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from visionmt.autodiff import ShapeError, finite_difference_check
from visionmt.objectives.vl import (VLParams, gather_text_embeddings, match_matrix,
                                    sigmoid_contrastive_loss)


def params64(scale=10.0, bias=-10.0):
    return VLParams(scale, bias).double()


def brute_force(v, t, tau, beta, y):
    """Double loop over pairs with log(1 + exp(.)) written out."""
    total = 0.0
    for i in range(v.shape[0]):
        for j in range(t.shape[0]):
            z = y[i][j] * (-tau * float(v[i] @ t[j]) + beta)
            total += max(z, 0.0) + math.log1p(math.exp(-abs(z)))
    return total / v.shape[0]


def test_single_pair_zero_similarity():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    loss = sigmoid_contrastive_loss(v, t, params64())
    assert loss.item() == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert loss.item() == pytest.approx(4.5399e-5, rel=1e-4)


def test_two_by_two_all_ones():
    v = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    t = v.clone()
    loss = sigmoid_contrastive_loss(v, t, params64())
    expected = 0.5 * (2 * math.log1p(math.exp(-20)) + 2 * math.log1p(math.exp(20)))
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert loss.item() == pytest.approx(20.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(4, 6, dtype=torch.float64, generator=g)
    t = torch.randn(5, 6, dtype=torch.float64, generator=g)
    y = torch.where(torch.rand(4, 5, generator=g, dtype=torch.float64) > 0.5, 1.0, -1.0).double()
    p = params64(3.0, 0.7)
    loss = sigmoid_contrastive_loss(v, t, p, y)
    assert loss.item() == pytest.approx(brute_force(v, t, 3.0, 0.7, y.tolist()), rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check_3x3(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(3, 5, dtype=torch.float64, generator=g).requires_grad_()
    t = torch.randn(3, 5, dtype=torch.float64, generator=g).requires_grad_()
    p = params64(2.0, -1.0)
    err = finite_difference_check(lambda: sigmoid_contrastive_loss(v, t, p), [v, t, p.log_scale, p.bias])
    assert err <= 1e-4


def test_rejections():
    p = params64()
    with pytest.raises(ValueError):
        sigmoid_contrastive_loss(torch.zeros(0, 4), torch.zeros(0, 4), p)
    with pytest.raises(ShapeError):
        sigmoid_contrastive_loss(torch.zeros(2, 4), torch.zeros(2, 3), p)
    with pytest.raises(ShapeError):
        sigmoid_contrastive_loss(torch.zeros(2, 4), torch.zeros(2, 4), p, torch.ones(3, 3))


def test_scale_positive_by_construction():
    p = VLParams(1e-6, 0.0)
    with torch.no_grad():
        p.log_scale -= 100
    assert p.scale.item() >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_row_permutation_invariance(seed, b):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(b, 4, dtype=torch.float64, generator=g)
    t = torch.randn(b, 4, dtype=torch.float64, generator=g)
    y = match_matrix(b, b, dtype=torch.float64)
    perm = torch.randperm(b, generator=g)
    p = params64(2.0, 1.0)
    a = sigmoid_contrastive_loss(v, t, p, y)
    c = sigmoid_contrastive_loss(v[perm], t[perm], p, y[perm][:, perm])
    assert a.item() == pytest.approx(c.item(), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_directional_monotonicity(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(3, 4, dtype=torch.float64, generator=g)
    t = torch.eye(3, 4, dtype=torch.float64)  # orthonormal texts isolate single dot products
    p = params64(2.0, 0.0)
    base = sigmoid_contrastive_loss(v, t, p).item()
    closer = v.clone()
    closer[0, 0] += 0.1  # raises v0.t0, a matched pair
    assert sigmoid_contrastive_loss(closer, t, p).item() < base
    away = v.clone()
    away[0, 1] += 0.1  # raises v0.t1, an unmatched pair
    assert sigmoid_contrastive_loss(away, t, p).item() > base


def test_overflow_safety():
    v = torch.tensor([[1.0], [1.0]], dtype=torch.float64, requires_grad=True)
    t = torch.tensor([[1000.0], [-1000.0]], dtype=torch.float64, requires_grad=True)
    p = params64(10.0, 0.0)  # logits of magnitude 1e4
    loss = sigmoid_contrastive_loss(v, t, p)
    loss.backward()
    assert math.isfinite(loss.item())
    assert torch.isfinite(v.grad).all() and torch.isfinite(t.grad).all()


def test_gather_single_worker_identity():
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    out = gather_text_embeddings([x])
    assert torch.equal(out, x)
    out.sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_gather_worker_order():
    a, b = torch.zeros(2, 3), torch.ones(2, 3)
    out = gather_text_embeddings([a, b])
    assert out.shape == (4, 3)
    assert torch.equal(out[:2], a) and torch.equal(out[2:], b)


def test_gather_rejects_ragged():
    with pytest.raises(ShapeError):
        gather_text_embeddings([torch.zeros(2, 3), torch.zeros(2, 4)])


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_gathered_loss_and_grads_match_single_worker(workers):
    g = torch.Generator().manual_seed(workers)
    b, d = 8, 5
    v = torch.randn(b, d, dtype=torch.float64, generator=g)
    t = torch.randn(b, d, dtype=torch.float64, generator=g)
    p = params64(2.0, -1.0)

    t_full = t.clone().requires_grad_()
    ref = sigmoid_contrastive_loss(v, t_full, p)
    ref.backward()

    shards = [s.clone().requires_grad_() for s in t.chunk(workers)]
    gathered = gather_text_embeddings(shards)
    per = b // workers
    total = 0.0
    for w in range(workers):
        y = match_matrix(per, b, offset=w * per, dtype=torch.float64)
        total = total + sigmoid_contrastive_loss(v[w * per:(w + 1) * per], gathered, p, y, denominator=b)
    total.backward()
    assert abs(total.item() - ref.item()) <= 1e-6
    assert torch.allclose(torch.cat([s.grad for s in shards]), t_full.grad, atol=1e-6)
