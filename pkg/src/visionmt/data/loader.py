"""Epoch shuffling, worker partitioning, collation and size filtering."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np
import torch

from ..encoders import pad_tokens
from .schema import Sample
from .synthetic import sample_rng
from .views import ViewConfig, make_views

MAX_REGIONS = 4
VIEW_STREAM = 1
REGION_STREAM = 2


def filter_sample(height: int, width: int, min_side: int = 32, max_side: int = 128):
    """Decide ("drop" | "resize" | "keep", new_size) from image dimensions.

    Images whose short side is under `min_side` are dropped; images whose long
    side exceeds `max_side` are downsampled keeping the aspect ratio.
    """
    if height <= 0 or width <= 0:
        raise ValueError("image dimensions must be positive")
    if min(height, width) < min_side:
        return "drop", None
    long_side = max(height, width)
    if long_side > max_side:
        scale = max_side / long_side
        return "resize", (max(1, round(height * scale)), max(1, round(width * scale)))
    return "keep", (height, width)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)


def iterate_batches(data: Sequence | int, batch_size: int, seed: int, worker_id: int = 0,
                    worker_count: int = 1, epoch: int = 0, drop_last: bool = True
                    ) -> Iterator[np.ndarray]:
    """Yield this worker's sample indices, one array per step.

    Global batch k covers shuffled positions [k*b*W, (k+1)*b*W); worker w takes
    the w-th contiguous slice of size b. With drop_last=False the trailing
    partial batch is split evenly and the n mod W leftover samples are left
    out, so the union over workers is the whole epoch whenever W divides n.
    """
    n = data if isinstance(data, int) else len(data)
    if not 0 <= worker_id < worker_count:
        raise ValueError(f"worker_id {worker_id} outside [0, {worker_count})")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds {n} samples")
    perm = epoch_permutation(n, seed, epoch)
    gb = batch_size * worker_count
    full = n // gb
    for k in range(full):
        start = k * gb + worker_id * batch_size
        yield perm[start:start + batch_size]
    rest = n - full * gb
    if not drop_last and rest >= worker_count:
        share = rest // worker_count
        start = full * gb + worker_id * share
        yield perm[start:start + share]


class ArrayDataset:
    """Samples stacked into contiguous arrays for fast batching."""

    def __init__(self, samples: list[Sample]):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = samples
        self.images = np.stack([s.image for s in samples]).astype(np.float32)
        self.depths = np.stack([s.depth for s in samples]).astype(np.float32)

    def __len__(self):
        return len(self.samples)


@dataclass
class Batch:
    images: torch.Tensor          # B x 3 x H x W
    caption_ids: torch.Tensor     # B x T
    caption_len: torch.Tensor     # B
    depth: torch.Tensor           # B x H x W
    region_owner: torch.Tensor    # R, index into the batch
    boxes: torch.Tensor           # R x 4
    region_ids: torch.Tensor      # R x T
    region_len: torch.Tensor      # R
    global_crops: torch.Tensor    # B x 3 x G x G
    local_crops: torch.Tensor     # B x M x 3 x L x L
    masks: torch.Tensor           # B x N bool
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        conv = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("images", "depth", "boxes", "global_crops", "local_crops"):
            conv[k] = conv[k].to(dtype)
        return Batch(**conv)

    def split(self, parts: int) -> list["Batch"]:
        """Contiguous per-worker sub-batches, in order."""
        if self.size % parts:
            raise ValueError(f"batch of {self.size} not divisible into {parts} workers")
        b = self.size // parts
        out = []
        for w in range(parts):
            lo, hi = w * b, (w + 1) * b
            sel = (self.region_owner >= lo) & (self.region_owner < hi)
            out.append(Batch(
                images=self.images[lo:hi], caption_ids=self.caption_ids[lo:hi],
                caption_len=self.caption_len[lo:hi], depth=self.depth[lo:hi],
                region_owner=self.region_owner[sel] - lo, boxes=self.boxes[sel],
                region_ids=self.region_ids[sel], region_len=self.region_len[sel],
                global_crops=self.global_crops[lo:hi], local_crops=self.local_crops[lo:hi],
                masks=self.masks[lo:hi], indices=self.indices[lo:hi],
            ))
        return out


def collate(data: ArrayDataset, indices: np.ndarray, seed: int, epoch: int, text_len: int,
            view_cfg: ViewConfig | None = None) -> Batch:
    """Build a batch; all randomness is keyed on (seed, epoch, sample index)."""
    view_cfg = view_cfg or ViewConfig()
    indices = np.asarray(indices)
    caps, owners, boxes, rtoks = [], [], [], []
    gcrops, lcrops, masks = [], [], []
    for b, i in enumerate(indices):
        s = data.samples[int(i)]
        caps.append(s.caption)
        regions = s.regions
        if len(regions) > MAX_REGIONS:
            rng = sample_rng(seed, int(i), REGION_STREAM * 100003 + epoch)
            keep = np.sort(rng.choice(len(regions), MAX_REGIONS, replace=False))
            regions = [regions[k] for k in keep]
        for r in regions:
            owners.append(b)
            boxes.append(r.box)
            rtoks.append(r.tokens)
        vs = make_views(data.images[int(i)], sample_rng(seed, int(i), VIEW_STREAM * 100003 + epoch),
                        view_cfg)
        gcrops.append(vs.global_crop)
        lcrops.append(vs.local_crops)
        masks.append(vs.mask.patches)
    cap_ids, cap_len = pad_tokens(caps, text_len)
    if rtoks:
        reg_ids, reg_len = pad_tokens(rtoks, text_len)
    else:
        reg_ids = torch.zeros(0, text_len, dtype=torch.long)
        reg_len = torch.zeros(0, dtype=torch.long)
    return Batch(
        images=torch.from_numpy(data.images[indices].transpose(0, 3, 1, 2).copy()),
        caption_ids=cap_ids, caption_len=cap_len,
        depth=torch.from_numpy(data.depths[indices].copy()),
        region_owner=torch.as_tensor(owners, dtype=torch.long),
        boxes=torch.from_numpy(np.stack(boxes)) if boxes else torch.zeros(0, 4),
        region_ids=reg_ids, region_len=reg_len,
        global_crops=torch.from_numpy(np.stack(gcrops)),
        local_crops=torch.from_numpy(np.stack(lcrops)),
        masks=torch.from_numpy(np.stack(masks)),
        indices=indices,
    )
