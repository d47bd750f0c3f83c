"""Region grounding (box-conditioned prompter) and dense depth supervision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..autodiff import ShapeError, check_finite, keep_smallest_mask, subsample
from ..encoders import Block
from .vl import VLParams, sigmoid_contrastive_loss

DEPTH_GM_WEIGHT = 2.0


class DegenerateDepthError(ValueError):
    """Depth map with zero mean absolute deviation."""


def validate_boxes(boxes: torch.Tensor) -> None:
    if boxes.dim() != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"boxes must be R x 4, got {tuple(boxes.shape)}")
    x0, y0, x1, y1 = boxes.unbind(-1)
    if ((x0 >= x1) | (y0 >= y1)).any():
        raise ValueError("degenerate box (x0 >= x1 or y0 >= y1)")
    if ((boxes < 0) | (boxes > 1)).any():
        raise ValueError("box coordinates outside [0, 1]")


class Prompter(nn.Module):
    """One transformer layer over [query, top-left, bottom-right, patches].

    Each corner is a sinusoidal encoding of its (x, y) projected to D plus a
    learned corner-type embedding. The query output, projected and
    L2-normalized, is the region embedding.
    """

    def __init__(self, dim: int, heads: int, bands: int = 8, mlp_ratio: int = 4):
        super().__init__()
        self.bands = bands
        self.query = nn.Parameter(torch.randn(dim) * 0.02)
        self.loc_proj = nn.Linear(4 * bands, dim)
        self.corner_type = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.layer = Block(dim, heads, mlp_ratio)
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, dim)

    def encode_corner(self, xy: torch.Tensor) -> torch.Tensor:
        freqs = (2.0 ** torch.arange(self.bands, dtype=xy.dtype)) * math.pi
        ang = xy[..., None] * freqs
        enc = torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)
        return self.loc_proj(enc)

    def forward(self, z_star: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """z_star: R x N x D (per-region copy of its image's features), boxes: R x 4."""
        validate_boxes(boxes)
        if z_star.shape[0] != boxes.shape[0]:
            raise ShapeError(f"{z_star.shape[0]} feature sets for {boxes.shape[0]} boxes")
        r, _, d = z_star.shape
        tl = self.encode_corner(boxes[:, :2]) + self.corner_type[0]
        br = self.encode_corner(boxes[:, 2:]) + self.corner_type[1]
        q = self.query.to(z_star.dtype).expand(r, d)
        seq = torch.cat([q[:, None], tl[:, None], br[:, None], z_star], dim=1)
        out = self.layer(seq)[:, 0]
        return F.normalize(self.proj(self.norm(out)), dim=-1, eps=1e-12)


def prompter_region_embedding(z_star, boxes, prompter: Prompter):
    return prompter(z_star, boxes)


def grounding_loss(region_emb: torch.Tensor, region_text: torch.Tensor, params: VLParams,
                   y: torch.Tensor | None = None, denominator: float | None = None
                   ) -> tuple[torch.Tensor, bool]:
    """Sigmoid contrastive loss over pooled regions; (loss, empty_flag)."""
    if region_emb.shape[0] == 0:
        return params.bias * 0.0, True
    return sigmoid_contrastive_loss(region_emb, region_text, params, y, denominator), False


@dataclass
class DepthHeadConfig:
    taps: tuple[int, ...] = (2, 3, 4, 6)
    width: int = 32
    dim: int = 64
    grid: int = 4
    image_size: int = 32


class ResidualConvUnit(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class DepthHead(nn.Module):
    """DPT-style decoder: reassemble taps at 4 strides, fuse coarse to fine."""

    def __init__(self, cfg: DepthHeadConfig):
        super().__init__()
        self.cfg = cfg
        n = len(cfg.taps)
        c = cfg.width
        self.reassemble = nn.ModuleList(nn.Conv2d(cfg.dim, c, 1) for _ in range(n))
        # factor 2**(n-2-i): shallow taps are upsampled, the deepest pooled once
        self.factors = [2 ** (n - 2 - i) for i in range(n)]
        self.skip_units = nn.ModuleList(ResidualConvUnit(c) for _ in range(n))
        self.merge_units = nn.ModuleList(ResidualConvUnit(c) for _ in range(n))
        self.out = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1), nn.ReLU(), nn.Conv2d(c // 2, 1, 1),
        )

    def _grid(self, tokens: torch.Tensor, grid: int) -> torch.Tensor:
        b, n, d = tokens.shape
        if n != grid * grid:
            raise ShapeError(f"{n} tokens do not form a {grid}x{grid} grid")
        return tokens.transpose(1, 2).reshape(b, d, grid, grid)

    def forward(self, layers: dict[int, torch.Tensor], grid: int | None = None,
                out_size: int | None = None) -> torch.Tensor:
        grid = self.cfg.grid if grid is None else grid
        out_size = self.cfg.image_size if out_size is None else out_size
        missing = [t for t in self.cfg.taps if t not in layers]
        if missing:
            raise KeyError(f"missing tap layers {missing}")
        maps = []
        for i, tap in enumerate(self.cfg.taps):
            x = self.reassemble[i](self._grid(layers[tap], grid))
            f = self.factors[i]
            if f > 1:
                x = F.interpolate(x, scale_factor=f, mode="nearest")
            elif f < 1:
                x = F.avg_pool2d(x, int(round(1 / f)))
            maps.append(x)
        fused = self.merge_units[-1](self.skip_units[-1](maps[-1]))
        for i in range(len(maps) - 2, -1, -1):
            fused = F.interpolate(fused, scale_factor=2, mode="nearest")
            fused = self.merge_units[i](fused + self.skip_units[i](maps[i]))
        fused = F.interpolate(fused, size=(out_size, out_size), mode="nearest")
        return self.out(fused)[:, 0]


def predict_depth(layers, head: DepthHead, grid: int | None = None) -> torch.Tensor:
    return head(layers, grid)


# ---------------------------------------------------------------- depth losses


def depth_stats(d: torch.Tensor, detach: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Median and mean absolute deviation over the last two axes."""
    flat = d.reshape(*d.shape[:-2], -1)
    s = torch.sort(flat, dim=-1).values
    n = s.shape[-1]
    if n % 2:
        t = s[..., n // 2]
    else:
        t = 0.5 * (s[..., n // 2 - 1] + s[..., n // 2])
    mad = (flat - t[..., None]).abs().mean(-1)
    if detach:
        t, mad = t.detach(), mad.detach()
    return t, mad


def normalize_depth(d: torch.Tensor, detach_stats: bool = False) -> torch.Tensor:
    """(d - median(d)) / mean|d - median(d)| over the last two axes."""
    check_finite(d, name="normalize_depth")
    t, s = depth_stats(d, detach_stats)
    if (s == 0).any():
        raise DegenerateDepthError("constant depth map")
    return (d - t[..., None, None]) / s[..., None, None]


def _valid(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _, sp = depth_stats(pred.detach())
    _, st = depth_stats(target.detach())
    return (sp > 0) & (st > 0)


def ssi_trim_residuals(pred, target, detach_stats=False):
    return (normalize_depth(target, True) - normalize_depth(pred, detach_stats)).abs()


def ssi_trim_loss(pred: torch.Tensor, target: torch.Tensor, trim: float = 0.10,
                  detach_stats: bool = False) -> torch.Tensor:
    """Trimmed scale-and-shift-invariant loss of one H x W map.

    Residuals of the median/MAD-normalized maps are sorted and the smallest
    floor((1 - trim) * HW) are summed, then divided by 2HW. The trim mask
    carries no gradient. With `detach_stats` the prediction's median and MAD
    are treated as constants as well.
    """
    if pred.shape != target.shape or pred.dim() != 2:
        raise ShapeError(f"depth maps {tuple(pred.shape)} vs {tuple(target.shape)}")
    r = ssi_trim_residuals(pred, target, detach_stats)
    hw = r.numel()
    keep = int(math.floor((1.0 - trim) * hw + 1e-9))
    mask = keep_smallest_mask(r, keep)
    return (r * mask).sum() / (2 * hw)


def gradient_matching_loss(pred: torch.Tensor, target: torch.Tensor, scales: int = 4,
                           detach_stats: bool = False) -> torch.Tensor:
    """Multi-scale gradient penalty on the normalized residual map.

    Scale k uses stride 2**k; each contributes mean|dR/dx| + mean|dR/dy|.
    """
    if pred.shape != target.shape or pred.dim() != 2:
        raise ShapeError(f"depth maps {tuple(pred.shape)} vs {tuple(target.shape)}")
    h, w = pred.shape
    if h < 2**scales or w < 2**scales:
        raise ShapeError(f"map {h}x{w} too small for {scales} scales")
    res = normalize_depth(pred, detach_stats) - normalize_depth(target, True)
    total = res.new_zeros(())
    for k in range(scales):
        r = subsample(res, 2**k)
        gx = r[:, 1:] - r[:, :-1]
        gy = r[1:, :] - r[:-1, :]
        total = total + gx.abs().mean() + gy.abs().mean()
    return total


def depth_loss(ssitrim, gm):
    return ssitrim + DEPTH_GM_WEIGHT * gm


def dense_total(ground, depth):
    return ground + depth


def batch_depth_loss(pred: torch.Tensor, target: torch.Tensor, trim: float = 0.10, scales: int = 4,
                     detach_stats: bool = False) -> tuple[torch.Tensor, dict, int]:
    """Per-sample depth losses averaged over non-degenerate samples.

    Returns (loss, components, skipped_count). Works on B x H x W stacks in
    one vectorized pass; the per-map functions above are the reference.
    """
    if pred.shape != target.shape or pred.dim() != 3:
        raise ShapeError(f"depth batches {tuple(pred.shape)} vs {tuple(target.shape)}")
    b, h, w = pred.shape
    ok = _valid(pred, target)
    skipped = int((~ok).sum())
    if not ok.any():
        z = pred.sum() * 0.0
        return z, {"ssitrim": z, "gm": z}, skipped
    pred, target = pred[ok], target[ok]
    tp, sp = depth_stats(pred, detach_stats)
    tt, st = depth_stats(target, True)
    pn = (pred - tp[:, None, None]) / sp[:, None, None]
    tn = (target - tt[:, None, None]) / st[:, None, None]
    r = (tn - pn).abs().reshape(pred.shape[0], -1)
    hw = h * w
    keep = int(math.floor((1.0 - trim) * hw + 1e-9))
    order = torch.sort(r.detach(), dim=-1, stable=True).indices
    mask = torch.zeros_like(r, dtype=torch.bool).scatter_(1, order[:, :keep], True)
    ssitrim = (r * mask).sum(-1) / (2 * hw)
    res = pn - tn
    gm = torch.zeros_like(ssitrim)
    for k in range(scales):
        rk = subsample(res, 2**k)
        gm = gm + (rk[:, :, 1:] - rk[:, :, :-1]).abs().mean((1, 2)) \
            + (rk[:, 1:, :] - rk[:, :-1, :]).abs().mean((1, 2))
    per = ssitrim + DEPTH_GM_WEIGHT * gm
    return per.mean(), {"ssitrim": ssitrim.mean(), "gm": gm.mean()}, skipped
