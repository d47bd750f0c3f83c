"""Random-resized crops and patch masks for the self-supervised branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..encoders import MaskPattern


@dataclass
class ViewConfig:
    global_size: int = 32
    local_size: int = 16
    n_local: int = 6
    patch_size: int = 8
    mask_ratio: float = 0.5
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)


@dataclass
class ViewSet:
    global_crop: np.ndarray  # 3 x G x G
    local_crops: np.ndarray  # M x 3 x L x L
    mask: MaskPattern
    global_box: tuple[float, float, float, float]  # pixel (x0, y0, w, h)
    local_boxes: list[tuple[float, float, float, float]]


def sample_box(rng: np.random.Generator, h: int, w: int, scale, ratio, tries: int = 10):
    """Crop box (x0, y0, bw, bh) in pixels covering `scale` of the image area."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(tries):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_r))
        bw = math.sqrt(target * ar)
        bh = math.sqrt(target / ar)
        if bw <= w and bh <= h:
            x0 = rng.uniform(0, w - bw)
            y0 = rng.uniform(0, h - bh)
            return (x0, y0, bw, bh)
    side = min(h, w) * math.sqrt(scale[1])
    return ((w - side) / 2, (h - side) / 2, side, side)


def crop_resize(image: torch.Tensor, boxes, out: int) -> torch.Tensor:
    """Bilinear crops of a 3 x H x W tensor at pixel boxes, each resized to out x out."""
    _, h, w = image.shape
    theta = torch.zeros(len(boxes), 2, 3, dtype=image.dtype)
    for i, (x0, y0, bw, bh) in enumerate(boxes):
        theta[i, 0, 0] = bw / w
        theta[i, 0, 2] = (2 * x0 + bw) / w - 1
        theta[i, 1, 1] = bh / h
        theta[i, 1, 2] = (2 * y0 + bh) / h - 1
    grid = F.affine_grid(theta, (len(boxes), 3, out, out), align_corners=False)
    src = image.unsqueeze(0).expand(len(boxes), -1, -1, -1)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def make_views(image: np.ndarray, rng: np.random.Generator, cfg: ViewConfig | None = None) -> ViewSet:
    """One global crop, `n_local` local crops and a mask over the global crop's patches."""
    cfg = cfg or ViewConfig()
    h, w, _ = image.shape
    if h < cfg.global_size or w < cfg.global_size:
        raise ValueError(f"image {h}x{w} smaller than global crop {cfg.global_size}")
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    gbox = sample_box(rng, h, w, cfg.global_scale, cfg.ratio)
    lboxes = [sample_box(rng, h, w, cfg.local_scale, cfg.ratio) for _ in range(cfg.n_local)]
    n = (cfg.global_size // cfg.patch_size) ** 2
    mask = MaskPattern.random(n, cfg.mask_ratio, rng)
    g = crop_resize(t, [gbox], cfg.global_size)[0]
    loc = crop_resize(t, lboxes, cfg.local_size)
    return ViewSet(g.numpy(), loc.numpy(), mask, gbox, lboxes)
