"""Pairwise sigmoid image-text loss and the cross-worker text gather."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..autodiff import ShapeError, check_finite


class VLParams(nn.Module):
    """Learnable logit scale (log-parameterized) and bias of the sigmoid loss.

    The loss below uses the bias with the sign convention
    ``y * (-tau * v.t + bias)``, so a bias of -10 scores every pair as
    matched at zero similarity. `bias_init=10.0` starts from the usual
    "all pairs unmatched" prior under this convention.
    """

    def __init__(self, scale_init: float = 10.0, bias_init: float = -10.0):
        super().__init__()
        # held in float64 so a 64-bit model gets exactly log(scale_init)
        self.log_scale = nn.Parameter(torch.tensor(math.log(scale_init), dtype=torch.float64))
        self.bias = nn.Parameter(torch.tensor(float(bias_init), dtype=torch.float64))

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()


def match_matrix(rows: int, cols: int, offset: int = 0, dtype=None) -> torch.Tensor:
    """+1 where row i is paired with column i + offset, -1 elsewhere."""
    y = -torch.ones(rows, cols, dtype=dtype)
    idx = torch.arange(rows)
    y[idx, idx + offset] = 1.0
    return y


def sigmoid_contrastive_loss(
    v: torch.Tensor,
    t: torch.Tensor,
    params: VLParams,
    y: torch.Tensor | None = None,
    denominator: float | None = None,
) -> torch.Tensor:
    """(1/B) sum_ij log(1 + exp(y_ij (-tau v_i.t_j + bias))).

    `v` is B x D, `t` is B' x D. `y` defaults to diagonal matching. The sum is
    divided by `denominator` (default B); the worker-sharded path passes the
    per-worker share of the global count here.
    """
    if v.shape[0] == 0:
        raise ValueError("empty batch")
    if v.dim() != 2 or t.dim() != 2 or v.shape[1] != t.shape[1]:
        raise ShapeError(f"embedding shapes {tuple(v.shape)} vs {tuple(t.shape)}")
    if y is None:
        y = match_matrix(v.shape[0], t.shape[0], dtype=v.dtype)
    if y.shape != (v.shape[0], t.shape[0]):
        raise ShapeError(f"match matrix {tuple(y.shape)} vs {(v.shape[0], t.shape[0])}")
    check_finite(v, t, name="sigmoid_contrastive_loss")
    logits = -params.scale * (v @ t.T) + params.bias
    per_pair = F.softplus(y.to(logits.dtype) * logits)
    denom = v.shape[0] if denominator is None else denominator
    return per_pair.sum() / denom


def gather_text_embeddings(shards: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-worker embeddings in worker order.

    Backward routes each slice of the incoming gradient to the shard that
    produced it, i.e. the reduce-scatter half of a differentiable all_gather.
    """
    if not shards:
        raise ValueError("need at least one worker shard")
    d = shards[0].shape[-1]
    for s in shards:
        if s.dim() != 2 or s.shape[-1] != d:
            raise ShapeError(f"ragged shard shapes: {[tuple(x.shape) for x in shards]}")
    if len(shards) == 1:
        return shards[0]
    return torch.cat(shards, dim=0)
