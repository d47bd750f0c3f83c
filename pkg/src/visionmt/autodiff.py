"""Tensor kernels and gradient utilities shared by every objective.

Differentiation is delegated to torch autograd. This module adds the pieces
torch does not provide with the exact semantics the objectives need: robust
median / mean-absolute-deviation statistics, gradient-stopped trim masks,
a checked (finite-only) mode, and a finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

GradientMap = dict[str, torch.Tensor]

_CHECKED = False


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when a kernel receives NaN or inf."""


class NonDeterministicError(RuntimeError):
    pass


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite kernel inputs while the context is active."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


def is_checked() -> bool:
    return _CHECKED


def check_finite(*tensors: torch.Tensor, name: str = "input") -> None:
    if not _CHECKED:
        return
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteError(f"non-finite values in {name}")


def require_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "tensors") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def set_precision(precision: str) -> torch.dtype:
    dtype = {"float32": torch.float32, "float64": torch.float64}[precision]
    torch.set_default_dtype(dtype)
    return dtype


# ---------------------------------------------------------------- kernels


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    check_finite(a, b, name="matmul")
    return a @ b


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    check_finite(x, name="l2_normalize")
    return F.normalize(x, dim=dim, eps=eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    check_finite(x, name="softmax")
    return torch.softmax(x, dim=dim)


def logsumexp(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    check_finite(x, name="logsumexp")
    return torch.logsumexp(x, dim=dim)


def median(x: torch.Tensor) -> torch.Tensor:
    """Median over all elements; mean of the two middle values for even counts.

    Differentiable: the gradient lands on the middle element(s) of the sort.
    """
    check_finite(x, name="median")
    flat = x.reshape(-1)
    n = flat.numel()
    if n == 0:
        raise ShapeError("median of empty tensor")
    s = torch.sort(flat).values
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def mean_abs_deviation(x: torch.Tensor, center: torch.Tensor | None = None) -> torch.Tensor:
    """mean(|x - center|), center defaulting to the median."""
    if center is None:
        center = median(x)
    return (x - center).abs().mean()


def keep_smallest_mask(values: torch.Tensor, keep: int) -> torch.Tensor:
    """Gradient-stopped boolean mask selecting the `keep` smallest entries.

    Ties resolve towards the lower flat index, so the mask is deterministic.
    """
    flat = values.detach().reshape(-1)
    if not 0 <= keep <= flat.numel():
        raise ValueError(f"keep={keep} outside [0, {flat.numel()}]")
    order = torch.sort(flat, stable=True).indices
    mask = torch.zeros(flat.numel(), dtype=torch.bool, device=flat.device)
    mask[order[:keep]] = True
    return mask.reshape(values.shape)


def avg_pool2d(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.avg_pool2d(x, factor)


def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def subsample(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Strided subsample over the last two axes."""
    return x[..., ::stride, ::stride]


# ---------------------------------------------------------------- gradients


def named_parameters(params: Mapping[str, torch.Tensor] | torch.nn.Module) -> dict[str, torch.Tensor]:
    if isinstance(params, torch.nn.Module):
        return {k: p for k, p in params.named_parameters() if p.requires_grad}
    return {k: p for k, p in params.items() if p.requires_grad}


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | torch.nn.Module) -> GradientMap:
    """Reverse-mode gradients of a scalar loss w.r.t. every grad-enabled parameter.

    Parameters the loss does not reach get a zero gradient. The graph is
    retained, so calling this twice on the same loss returns the same map.
    """
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    named = named_parameters(params)
    if not named:
        return {}
    names = list(named)
    tensors = [named[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, retain_graph=True, allow_unused=True)
    return {
        n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)
    }


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: int | None = 64,
    coords: Sequence[Iterable[int]] | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    `f` is re-evaluated from the current parameter values each call and must
    be deterministic. `coords` optionally restricts, per parameter, which flat
    indices are sampled; otherwise up to `max_coords` indices per parameter are
    drawn at random (all of them when the parameter is small enough).
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with torch.no_grad():
        f0 = f().detach().clone()
        f1 = f().detach().clone()
    if not torch.equal(f0, f1):
        raise NonDeterministicError("f returned different values on repeated evaluation")

    for p in params:
        p.grad = None
    loss = f()
    analytic = torch.autograd.grad(loss, list(params), allow_unused=True)

    worst = 0.0
    for k, p in enumerate(params):
        ga = analytic[k]
        ga = torch.zeros_like(p) if ga is None else ga.detach()
        n = p.numel()
        if coords is not None:
            idx = [int(i) for i in coords[k]]
        elif max_coords is None or n <= max_coords:
            idx = list(range(n))
        else:
            idx = torch.randperm(n, generator=generator)[:max_coords].tolist()
        flat = p.data.view(-1)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = gflat[i].item()
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    return worst
