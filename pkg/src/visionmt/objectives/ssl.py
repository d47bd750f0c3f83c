"""Teacher-student self-distillation: heads, losses, EMA and centering."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..autodiff import ShapeError, check_finite

MASK_WEIGHT = 2.0
KOLEO_WEIGHT = 0.1


class ProjectionHead(nn.Module):
    """3-layer MLP, L2 normalization, weight-normalized projection to K prototypes.

    The projection magnitude `g` is frozen at 1 by default, which makes the
    scores cosine similarities against the prototype directions.
    """

    def __init__(self, in_dim: int, prototypes: int = 256, hidden: int = 128,
                 bottleneck: int = 64, learn_norm: bool = False):
        super().__init__()
        self.in_dim = in_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self.direction = nn.Parameter(torch.randn(prototypes, bottleneck) * 0.02)
        self.magnitude = nn.Parameter(torch.ones(prototypes, 1), requires_grad=learn_norm)

    @property
    def prototypes(self) -> int:
        return self.direction.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"head expects dim {self.in_dim}, got {tuple(x.shape)}")
        h = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        w = self.magnitude * self.direction / self.direction.norm(dim=1, keepdim=True)
        return h @ w.T


def prototype_scores(features: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(features)


def teacher_temperature(step: int, start: float = 0.04, end: float = 0.07,
                        warmup_steps: int = 30) -> float:
    if step >= warmup_steps:
        return end
    return start + (end - start) * step / warmup_steps


@dataclass
class TeacherState:
    """Everything the teacher side carries between steps.

    `centers` holds one running center per projection head ("distill",
    "mask"). Setting `centering=False` freezes them at zero.
    """

    prototypes: int
    momentum: float = 0.994
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup: int = 30
    centering: bool = True
    centers: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("distill", "mask"):
            self.centers.setdefault(name, torch.zeros(self.prototypes))

    def teacher_temp(self, step: int) -> float:
        return teacher_temperature(step, self.teacher_temp_start, self.teacher_temp_end,
                                   self.teacher_temp_warmup)


def _cross_entropy(teacher_scores, student_scores, center, t_temp, s_temp):
    if t_temp <= 0 or s_temp <= 0:
        raise ValueError("temperatures must be positive")
    check_finite(teacher_scores, student_scores, name="ssl scores")
    target = torch.softmax((teacher_scores.detach() - center.to(teacher_scores.dtype)) / t_temp, dim=-1)
    log_p = torch.log_softmax(student_scores / s_temp, dim=-1)
    return -(target * log_p).sum(-1)


def distillation_loss(student_local: torch.Tensor, teacher_global: torch.Tensor,
                      center: torch.Tensor, teacher_temp: float, student_temp: float) -> torch.Tensor:
    """Teacher-to-student cross-entropy, averaged over images and local crops.

    student_local: B x M x K raw scores; teacher_global: B x K raw scores.
    """
    if student_local.dim() != 3 or teacher_global.shape != (student_local.shape[0], student_local.shape[2]):
        raise ShapeError(
            f"student {tuple(student_local.shape)} vs teacher {tuple(teacher_global.shape)}")
    ce = _cross_entropy(teacher_global[:, None, :].expand_as(student_local), student_local,
                        center, teacher_temp, student_temp)
    return ce.mean()


def masked_prediction_loss(student_masked: torch.Tensor, teacher_masked: torch.Tensor,
                           center: torch.Tensor, teacher_temp: float, student_temp: float
                           ) -> tuple[torch.Tensor, bool]:
    """Cross-entropy at masked positions (P x K each), averaged over positions.

    Returns (loss, empty_flag); an empty position set yields a zero loss.
    """
    if student_masked.shape != teacher_masked.shape:
        raise ShapeError(f"{tuple(student_masked.shape)} vs {tuple(teacher_masked.shape)}")
    if student_masked.shape[0] == 0:
        return student_masked.sum() * 0.0, True
    ce = _cross_entropy(teacher_masked, student_masked, center, teacher_temp, student_temp)
    return ce.mean(), False


def koleo_loss(x: torch.Tensor, rows: torch.Tensor | None = None, denominator: float | None = None,
               floor: float = 1e-8) -> torch.Tensor:
    """-(1/B) sum_i log(min_{j != i} |x_i - x_j|) over L2-normalized rows.

    `rows` restricts the outer sum to a subset of indices (one worker's local
    rows inside a gathered batch); `denominator` overrides B.
    """
    if x.shape[0] < 2:
        raise ValueError("KoLeo needs at least two embeddings")
    xn = F.normalize(x, dim=-1, eps=1e-12)
    if rows is None:
        rows = torch.arange(x.shape[0])
    diff = xn[rows][:, None, :] - xn[None, :, :]
    d2 = (diff * diff).sum(-1)
    self_mask = rows[:, None] == torch.arange(x.shape[0])[None, :]
    d2 = d2.masked_fill(self_mask, math.inf)
    nn_d2 = d2.min(dim=1).values
    dist = torch.sqrt(torch.clamp(nn_d2, min=floor * floor))
    denom = len(rows) if denominator is None else denominator
    return -torch.log(dist).sum() / denom


def ssl_total(distill, mask, koleo):
    return distill + MASK_WEIGHT * mask + KOLEO_WEIGHT * koleo


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys() or any(
            t_params[k].shape != s_params[k].shape for k in t_params):
        raise ShapeError("teacher and student parameter trees differ")
    for k, tp in t_params.items():
        tp.mul_(momentum).add_(s_params[k].detach(), alpha=1.0 - momentum)


def update_center(center: torch.Tensor, batch_mean: torch.Tensor, momentum: float = 0.9) -> torch.Tensor:
    if center.shape != batch_mean.shape:
        raise ShapeError(f"{tuple(center.shape)} vs {tuple(batch_mean.shape)}")
    return momentum * center + (1.0 - momentum) * batch_mean.detach()


def frozen_copy(module: nn.Module) -> nn.Module:
    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def softmax_entropy(scores: torch.Tensor, center: torch.Tensor, temp: float) -> torch.Tensor:
    """Mean entropy (nats) of softmax((scores - center) / temp) over rows."""
    p = torch.softmax((scores - center) / temp, dim=-1)
    return -(p * torch.log(p.clamp_min(1e-30))).sum(-1).mean()
