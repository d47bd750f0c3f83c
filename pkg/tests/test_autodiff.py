from __future__ import annotations

import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from visionmt import autodiff as ad


def test_matmul_identity():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(ad.matmul(a, torch.eye(2)), a)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_uniform():
    out = ad.softmax(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64))


def test_median_and_mad_odd():
    x = torch.tensor([3.0, 1.0, 2.0], dtype=torch.float64)
    assert ad.median(x).item() == 2.0
    assert ad.mean_abs_deviation(x).item() == pytest.approx(2 / 3, abs=1e-15)


def test_median_even_is_midpoint():
    x = torch.tensor([4.0, 1.0, 3.0, 2.0], dtype=torch.float64)
    assert ad.median(x).item() == 2.5
    assert ad.mean_abs_deviation(x).item() == 1.0


def test_checked_mode_rejects_non_finite():
    x = torch.tensor([1.0, float("nan")])
    ad.softmax(x)  # unchecked: passes through
    with ad.checked_mode():
        with pytest.raises(ad.NonFiniteError):
            ad.softmax(x)
    assert not ad.is_checked()


def test_keep_smallest_mask_ties_and_detach():
    v = torch.tensor([3.0, 1.0, 1.0, 2.0], requires_grad=True)
    m = ad.keep_smallest_mask(v, 2)
    assert m.tolist() == [False, True, True, False]
    assert not m.requires_grad
    with pytest.raises(ValueError):
        ad.keep_smallest_mask(v, 5)


def test_pool_upsample_subsample_shapes():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    assert ad.avg_pool2d(x, 2).shape == (1, 1, 2, 2)
    assert ad.avg_pool2d(x, 2)[0, 0, 0, 0].item() == (0 + 1 + 4 + 5) / 4
    assert ad.upsample_nearest(ad.avg_pool2d(x, 2), 2).shape == x.shape
    assert ad.subsample(x, 2)[0, 0].tolist() == [[0.0, 2.0], [8.0, 10.0]]


def test_backward_square():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    g = ad.backward((x * x).sum(), {"x": x})
    assert g["x"].tolist() == [2.0, 4.0]


def test_backward_constant_gives_zeros():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    g = ad.backward(torch.tensor(3.0), {"x": x})
    assert g["x"].tolist() == [0.0, 0.0]


def test_backward_idempotent_and_shapes():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 1))
    loss = net(torch.randn(5, 3)).pow(2).mean()
    g1 = ad.backward(loss, net)
    g2 = ad.backward(loss, net)
    for k, p in net.named_parameters():
        assert g1[k].shape == p.shape
        assert torch.equal(g1[k], g2[k])


def test_backward_rejects_non_scalar():
    x = torch.ones(2, requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2, {"x": x})


def test_fd_quadratic():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    assert ad.finite_difference_check(lambda: (x * x).sum(), [x], eps=1e-5) < 1e-6


def test_fd_three_layer_mlp():
    torch.manual_seed(1)
    net = nn.Sequential(nn.Linear(4, 8), nn.GELU(), nn.Linear(8, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    xin = torch.randn(6, 4, dtype=torch.float64)
    err = ad.finite_difference_check(lambda: net(xin).pow(2).mean(), list(net.parameters()), eps=1e-4)
    assert err < 1e-4


def test_fd_rejects_nondeterministic():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(ad.NonDeterministicError):
        ad.finite_difference_check(lambda: (x * torch.rand(1, dtype=torch.float64)).sum(), [x])


KERNELS = {
    "matmul": lambda a, b: ad.matmul(a, b.T).sin().sum(),
    "l2_normalize": lambda a, b: (ad.l2_normalize(a) * b).sum(),
    "softmax": lambda a, b: (ad.softmax(a) * b).sum(),
    "logsumexp": lambda a, b: ad.logsumexp(a * b).sum(),
    "mad": lambda a, b: ad.mean_abs_deviation(a + b),
    "layer_norm": lambda a, b: (torch.nn.functional.layer_norm(a, a.shape[-1:]) * b).sum(),
    "gelu": lambda a, b: (torch.nn.functional.gelu(a) * b).sum(),
    "pool_upsample": lambda a, b: (ad.upsample_nearest(ad.avg_pool2d(a.reshape(1, 1, 4, 4), 2), 2)
                                   .reshape(4, 4) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
@pytest.mark.parametrize("seed", range(10))
def test_fd_kernels(name, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 4, dtype=torch.float64, generator=g).requires_grad_()
    b = torch.randn(4, 4, dtype=torch.float64, generator=g).requires_grad_()
    f = KERNELS[name]
    assert ad.finite_difference_check(lambda: f(a, b), [a, b], eps=1e-6) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one_and_lse_safe(values):
    x = torch.tensor(values, dtype=torch.float64)
    assert abs(ad.softmax(x).sum().item() - 1.0) <= 1e-6
    assert math.isfinite(ad.logsumexp(x).item())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_determinism_bit_identical(seed):
    def run():
        torch.manual_seed(seed)
        net = nn.Linear(5, 3)
        return net(torch.randn(4, 5))
    assert torch.equal(run(), run())


def test_set_precision_round_trip():
    prev = torch.get_default_dtype()
    try:
        assert ad.set_precision("float64") == torch.float64
        assert torch.zeros(1).dtype == torch.float64
    finally:
        torch.set_default_dtype(prev)
