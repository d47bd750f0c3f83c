"""Toy vision transformer, attentive pooling and text tower."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import ShapeError, l2_normalize


@dataclass
class EncoderConfig:
    layers: int = 6
    patch_size: int = 8
    image_size: int = 32
    local_size: int = 16
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    text_vocab: int = 64
    text_len: int = 32
    text_layers: int = 2
    tap_layers: tuple[int, ...] = (2, 3, 4, 6)
    # fixed input standardization; pixels arrive in [0, 1]
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        self.tap_layers = tuple(sorted(int(t) for t in self.tap_layers))
        if self.image_size % self.patch_size or self.local_size % self.patch_size:
            raise ValueError("image sizes must be divisible by patch_size")
        if not self.tap_layers or self.tap_layers[0] < 1 or self.tap_layers[-1] > self.layers:
            raise ValueError(f"tap layers {self.tap_layers} outside 1..{self.layers}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """grid x grid x dim table: sin/cos of row then column over dim/4 frequencies each."""
    if dim % 4:
        raise ValueError("sin-cos table needs dim divisible by 4")
    q = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(q, dtype=torch.float64) / q)
    y, x = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                          torch.arange(grid, dtype=torch.float64), indexing="ij")
    parts = [f(c[..., None] * omega) for c in (y, x) for f in (torch.sin, torch.cos)]
    return torch.cat(parts, dim=-1).to(torch.get_default_dtype())


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_padding_mask=None):
        context = x if context is None else context
        b, nq, d = x.shape
        nk = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(context).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(context).view(b, nk, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        if key_padding_mask is not None:
            att = att.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask=key_padding_mask)
        return x + self.mlp(self.norm2(x))


@dataclass
class ImageFeatures:
    """Per-layer patch features of one forward pass.

    `layers[l]` is the output of block l (before the final norm); `final` is
    the normalized last layer fed to pooling. `layers[L]` is the pre-pool
    feature the region prompter consumes.
    """

    layers: dict[int, torch.Tensor]
    final: torch.Tensor
    grid: int

    @property
    def last(self) -> torch.Tensor:
        return self.layers[max(self.layers)]


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, d)
        # learnable, started from a 2D sin-cos table so position is visible from step 0
        self.pos_embed = nn.Parameter(sincos_2d(cfg.grid, d)[None])
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)

    def _pos(self, grid: int) -> torch.Tensor:
        pos = self.pos_embed
        if grid != self.cfg.grid:
            pos = F.interpolate(
                pos.permute(0, 3, 1, 2), size=(grid, grid), mode="bilinear", align_corners=False
            ).permute(0, 2, 3, 1)
        return pos.reshape(1, grid * grid, -1)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> ImageFeatures:
        """Encode B x 3 x S x S images, S being the global or local crop size.

        `mask` is a B x N boolean tensor; masked patches are replaced with the
        learned mask token before the positional embedding is added.
        """
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ShapeError(f"expected B x 3 x S x S images, got {tuple(images.shape)}")
        size = images.shape[-1]
        if size not in (self.cfg.image_size, self.cfg.local_size):
            raise ShapeError(
                f"image size {size} not in ({self.cfg.image_size}, {self.cfg.local_size})"
            )
        grid = size // self.cfg.patch_size
        x = (images - self.cfg.pixel_mean) / self.cfg.pixel_std
        x = self.patch_embed(self.patchify(x))
        if mask is not None:
            if mask.shape != x.shape[:2]:
                raise ShapeError(f"mask shape {tuple(mask.shape)} vs patches {tuple(x.shape[:2])}")
            x = torch.where(mask[..., None], self.mask_token.to(x.dtype), x)
        x = x + self._pos(grid)
        layers = {}
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self.cfg.tap_layers or i == self.cfg.layers:
                layers[i] = x
        return ImageFeatures(layers=layers, final=self.norm(x), grid=grid)


class AttentivePool(nn.Module):
    """Single learned query cross-attending over patches, then a residual MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 3 or z.shape[1] == 0:
            raise ShapeError(f"expected non-empty B x N x D patches, got {tuple(z.shape)}")
        q = self.query.expand(z.shape[0], -1, -1).to(z.dtype)
        x = self.attn(q, context=z)
        x = x + self.mlp(self.norm(x))
        return x[:, 0]


class TextEncoder(nn.Module):
    """Small transformer over token ids, mean-pooled and L2-normalized."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.tok = nn.Embedding(cfg.text_vocab, d)
        self.pos = nn.Parameter(torch.randn(1, cfg.text_len, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)
        nn.init.normal_(self.tok.weight, std=0.02)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """ids: B x T (padded), lengths: B. Returns B x D unit vectors."""
        if (lengths < 1).any():
            raise ValueError("empty token sequence")
        if ids.shape[1] > self.cfg.text_len:
            raise ShapeError(f"sequence length {ids.shape[1]} > text_len {self.cfg.text_len}")
        if (ids >= self.cfg.text_vocab).any() or (ids < 0).any():
            raise ValueError("token id outside vocabulary")
        t = ids.shape[1]
        pad = torch.arange(t, device=ids.device)[None, :] >= lengths[:, None]
        x = self.tok(ids) + self.pos[:, :t]
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad)
        x = self.norm(x)
        keep = (~pad).to(x.dtype)[..., None]
        pooled = (x * keep).sum(1) / keep.sum(1)
        return l2_normalize(self.proj(pooled))


def pad_tokens(seqs: list[list[int]] | list[np.ndarray], text_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token lists with id 0 into (ids, lengths) tensors."""
    ids = torch.zeros(len(seqs), text_len, dtype=torch.long)
    lengths = torch.zeros(len(seqs), dtype=torch.long)
    for i, s in enumerate(seqs):
        n = len(s)
        if n == 0:
            raise ValueError("empty token sequence")
        if n > text_len:
            raise ShapeError(f"token sequence of length {n} exceeds text_len {text_len}")
        ids[i, :n] = torch.as_tensor(np.asarray(s, dtype=np.int64))
        lengths[i] = n
    return ids, lengths


@dataclass
class MaskPattern:
    patches: np.ndarray = field(repr=False)
    ratio: float = 0.5

    @classmethod
    def random(cls, num_patches: int, ratio: float, rng: np.random.Generator) -> "MaskPattern":
        k = int(round(ratio * num_patches))
        m = np.zeros(num_patches, dtype=bool)
        m[rng.permutation(num_patches)[:k]] = True
        return cls(m, ratio)

    def __post_init__(self):
        n = len(self.patches)
        if abs(float(np.mean(self.patches)) - self.ratio) > 1.0 / n + 1e-12:
            raise ValueError("mask popcount inconsistent with ratio")
