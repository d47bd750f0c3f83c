"""Joint multi-task training with simulated lockstep data parallelism."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .autodiff import set_precision
from .checkpoint import load_module, load_tensors, module_tensors, save_tensors
from .data.loader import ArrayDataset, Batch, collate, iterate_batches
from .data.synthetic import generate_synthetic_dataset
from .data.views import ViewConfig
from .encoders import EncoderConfig
from .model import ModelBundle, ModelConfig, StudentModel
from .objectives import dense, ssl
from .objectives.vl import gather_text_embeddings, match_matrix, sigmoid_contrastive_loss

log = logging.getLogger(__name__)

TASKS = ("vl", "ssl", "ground", "depth")


class WorkerDivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tasks: tuple[str, ...] = TASKS
    lr: float = 5e-4
    warmup_steps: int = 100
    cosine: bool = False
    steps: int = 1000
    batch_size: int = 64
    workers: int = 1
    seed: int = 0
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # self-supervision
    ema_momentum: float = 0.994
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup: int = 100
    centering: bool = True
    n_local: int = 6
    mask_ratio: float = 0.5
    # dense
    trim: float = 0.10
    gm_scales: int = 4
    # model
    layers: int = 6
    width: int = 64
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    local_size: int = 16
    text_layers: int = 2
    tap_layers: tuple[int, ...] = (2, 3, 4, 6)
    prototypes: int = 256
    depth_width: int = 32
    vl_bias_init: float = 10.0
    # data
    n_train: int = 10000
    data_seed: int = 0
    data_dir: str = ""

    def __post_init__(self):
        if isinstance(self.tasks, str):
            self.tasks = tuple(t.strip() for t in self.tasks.split(",") if t.strip())
        bad = set(self.tasks) - set(TASKS)
        if bad:
            raise ValueError(f"unknown tasks {sorted(bad)}")
        self.tasks = tuple(t for t in TASKS if t in self.tasks)
        if not self.tasks:
            raise ValueError("at least one task must be enabled")
        if isinstance(self.tap_layers, str):
            self.tap_layers = tuple(int(x) for x in self.tap_layers.split(","))
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision {self.precision!r} not in float32/float64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(
            layers=self.layers, patch_size=self.patch_size, image_size=self.image_size,
            local_size=self.local_size, width=self.width, heads=self.heads,
            text_layers=self.text_layers, tap_layers=self.tap_layers)
        return ModelConfig(encoder=enc, prototypes=self.prototypes, depth_width=self.depth_width,
                           vl_bias_init=self.vl_bias_init)

    def view_config(self) -> ViewConfig:
        return ViewConfig(global_size=self.image_size, local_size=self.local_size,
                          n_local=self.n_local, patch_size=self.patch_size,
                          mask_ratio=self.mask_ratio)

    def teacher_state(self) -> ssl.TeacherState:
        return ssl.TeacherState(
            prototypes=self.prototypes, momentum=self.ema_momentum,
            center_momentum=self.center_momentum, student_temp=self.student_temp,
            teacher_temp_start=self.teacher_temp_start, teacher_temp_end=self.teacher_temp_end,
            teacher_temp_warmup=self.teacher_temp_warmup, centering=self.centering)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        for k in ("tasks", "tap_layers"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LossReport:
    step: int
    losses: dict[str, float]
    total: float
    grad_norm: float
    lr: float
    tau_t: float
    teacher_entropy: float = float("nan")
    flags: list[str] = field(default_factory=list)
    skipped: bool = False

    def to_record(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to cfg.lr, then constant (or cosine to 0 if enabled)."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if not cfg.cosine:
        return cfg.lr
    span = max(1, cfg.steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * frac))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def optimizer_step(optimizer: torch.optim.Optimizer, params: dict[str, torch.Tensor],
                   grads: dict[str, torch.Tensor], lr: float) -> None:
    """Install `grads` on `params` and take one AdamW step at learning rate `lr`."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} vs {tuple(p.shape)}")
        p.grad = None if g is None else g.detach().clone()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


# ---------------------------------------------------------------- losses


def _local_forward(student: StudentModel, teacher, batch: Batch, tasks, mask_ratio: float) -> dict:
    out: dict = {}
    if {"vl", "ground", "depth"} & set(tasks):
        feats = student.vision(batch.images)
        if "vl" in tasks:
            out["v"] = torch.nn.functional.normalize(student.pool(feats.final), dim=-1)
            out["t"] = student.text(batch.caption_ids, batch.caption_len)
        if "ground" in tasks:
            if len(batch.region_owner):
                z_star = feats.last[batch.region_owner]
                out["r"] = student.prompter(z_star, batch.boxes)
                out["rt"] = student.text(batch.region_ids, batch.region_len)
            else:
                d = student.cfg.encoder.width
                out["r"] = feats.last.new_zeros(0, d)
                out["rt"] = feats.last.new_zeros(0, d)
        if "depth" in tasks:
            out["depth"] = student.depth_head(feats.layers, feats.grid)
            out["depth_taps"] = feats.layers
    if "ssl" in tasks:
        masked = student.vision(batch.global_crops, mask=batch.masks)
        out["koleo"] = student.pool(masked.final)
        out["s_mask"] = student.mask_head(masked.final[batch.masks])
        b, m = batch.local_crops.shape[:2]
        loc = student.vision(batch.local_crops.flatten(0, 1))
        out["s_dist"] = student.dist_head(student.pool(loc.final)).view(b, m, -1)
        with torch.no_grad():
            tf = teacher.vision(batch.global_crops)
            out["t_dist"] = teacher.dist_head(teacher.pool(tf.final))
            t_patch = teacher.mask_head(tf.final)
            out["t_mask_all"] = t_patch
            out["t_mask"] = t_patch[batch.masks]
    return out


def compute_losses(students: list[StudentModel], teacher, state: ssl.TeacherState,
                   batches: list[Batch], tasks, step: int, cfg: TrainConfig) -> dict:
    """Per-task losses for W lockstep workers.

    Each worker scores its local rows against gathered columns and normalizes
    by the per-worker share of the global count, so the mean over workers of
    any task loss equals the single-worker loss on the concatenated batch.
    Returns reported (worker-mean) losses, the summed objective for backward,
    and teacher statistics for the center update.
    """
    W = len(students)
    locs = [_local_forward(s, teacher, b, tasks, cfg.mask_ratio) for s, b in zip(students, batches)]
    tau_t = state.teacher_temp(step)
    per_task = {k: [] for k in ("vl", "distill", "mask", "koleo", "ssl", "ground", "ssitrim", "gm",
                                "depth")}
    flags = set()
    if "vl" in tasks:
        T = gather_text_embeddings([o["t"] for o in locs])
        off = 0
        for s, o in zip(students, locs):
            b = o["v"].shape[0]
            y = match_matrix(b, T.shape[0], off, dtype=T.dtype)
            per_task["vl"].append(sigmoid_contrastive_loss(o["v"], T, s.vl, y, T.shape[0] / W))
            off += b
    if "ground" in tasks:
        RT = gather_text_embeddings([o["rt"] for o in locs])
        off = 0
        for s, o in zip(students, locs):
            r = o["r"].shape[0]
            if r == 0:
                per_task["ground"].append(s.ground.bias * 0.0)
                flags.add("ground_empty")
                continue
            y = match_matrix(r, RT.shape[0], off, dtype=RT.dtype)
            loss, _ = dense.grounding_loss(o["r"], RT, s.ground, y, RT.shape[0] / W)
            per_task["ground"].append(loss)
            off += r
        if "vl" not in tasks:
            flags.add("ground_without_vl")
    if "depth" in tasks:
        for b, o in zip(batches, locs):
            loss, parts, skipped = dense.batch_depth_loss(o["depth"], b.depth, cfg.trim, cfg.gm_scales)
            if skipped:
                flags.add("depth_degenerate_skipped")
            per_task["depth"].append(loss)
            per_task["ssitrim"].append(parts["ssitrim"])
            per_task["gm"].append(parts["gm"])
    extras = {}
    if "ssl" in tasks:
        dist_c = state.centers["distill"]
        mask_c = state.centers["mask"]
        K = gather_text_embeddings([o["koleo"] for o in locs])
        off = 0
        for o in locs:
            b = o["koleo"].shape[0]
            distill = ssl.distillation_loss(o["s_dist"], o["t_dist"], dist_c, tau_t, state.student_temp)
            mask, empty = ssl.masked_prediction_loss(o["s_mask"], o["t_mask"], mask_c, tau_t,
                                                     state.student_temp)
            if empty:
                flags.add("mask_empty")
            rows = torch.arange(off, off + b)
            koleo = ssl.koleo_loss(K, rows=rows, denominator=K.shape[0] / W)
            off += b
            per_task["distill"].append(distill)
            per_task["mask"].append(mask)
            per_task["koleo"].append(koleo)
            per_task["ssl"].append(ssl.ssl_total(distill, mask, koleo))
        t_dist = torch.cat([o["t_dist"] for o in locs])
        t_patch = torch.cat([o["t_mask_all"] for o in locs])
        extras["dist_mean"] = t_dist.mean(0)
        extras["mask_mean"] = t_patch.reshape(-1, t_patch.shape[-1]).mean(0)
        extras["teacher_entropy"] = float(ssl.softmax_entropy(t_dist, dist_c, tau_t))
    objective = sum(per_task[t][w] for t in tasks for w in range(W))
    reported = {k: torch.stack(v).mean() for k, v in per_task.items() if v}
    reported["total"] = sum(reported[t] for t in tasks)
    return {"objective": objective, "reported": reported, "extras": extras, "flags": flags,
            "tau_t": tau_t, "locals": locs}


# ---------------------------------------------------------------- trainer


def build_dataset(cfg: TrainConfig) -> ArrayDataset:
    if cfg.data_dir:
        from .data.shards import read_dataset
        manifest = Path(cfg.data_dir)
        if manifest.is_dir():
            manifest = manifest / "train.manifest"
        return ArrayDataset(read_dataset(manifest))
    return ArrayDataset(generate_synthetic_dataset(cfg.data_seed, cfg.n_train))


class Trainer:
    """Owns the model bundle, W worker replicas, optimizers and data position."""

    def __init__(self, cfg: TrainConfig, dataset: ArrayDataset | None = None):
        self.cfg = cfg
        set_precision(cfg.precision)
        self.data = dataset if dataset is not None else build_dataset(cfg)
        self.bundle = ModelBundle(cfg.model_config(), cfg.teacher_state(), cfg.seed, cfg.dtype)
        self.replicas = [self.bundle.student] + [copy.deepcopy(self.bundle.student)
                                                 for _ in range(cfg.workers - 1)]
        self.optimizers = [make_optimizer(r, cfg) for r in self.replicas]
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self._order: list[np.ndarray] | None = None
        self.view_cfg = cfg.view_config()

    @property
    def model(self) -> StudentModel:
        return self.bundle.student

    def _epoch_order(self) -> list[np.ndarray]:
        if self._order is None:
            gb = self.cfg.batch_size * self.cfg.workers
            self._order = list(iterate_batches(len(self.data), gb, self.cfg.seed, 0, 1, self.epoch))
        return self._order

    def next_batch(self) -> Batch:
        order = self._epoch_order()
        if self.batch_in_epoch >= len(order):
            self.epoch += 1
            self.batch_in_epoch = 0
            self._order = None
            order = self._epoch_order()
        idx = order[self.batch_in_epoch]
        self.batch_in_epoch += 1
        return collate(self.data, idx, self.cfg.seed, self.epoch, self.cfg.model_config().encoder.text_len,
                       self.view_cfg).to(self.cfg.dtype)

    def train_step(self, batch: Batch | None = None) -> LossReport:
        """Forward all enabled objectives, backward, all-reduce, AdamW, EMA, center."""
        cfg = self.cfg
        batch = self.next_batch() if batch is None else batch.to(cfg.dtype)
        shards = batch.split(cfg.workers) if cfg.workers > 1 else [batch]
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)
        out = compute_losses(self.replicas, self.bundle.teacher, self.bundle.state, shards,
                             cfg.tasks, self.step, cfg)
        lr = lr_schedule(self.step, cfg)
        rep = out["reported"]
        flags = sorted(out["flags"])
        losses = {k: float(v.detach()) for k, v in rep.items() if k != "total"}
        total = float(rep["total"].detach())
        report = LossReport(step=self.step, losses=losses, total=total, grad_norm=float("nan"),
                            lr=lr, tau_t=out["tau_t"],
                            teacher_entropy=out["extras"].get("teacher_entropy", float("nan")),
                            flags=flags)
        if not math.isfinite(total):
            return self._abort(report, "non_finite_loss")
        out["objective"].backward()
        grads = self._all_reduce()
        gnorm = torch.sqrt(sum((g * g).sum() for g in grads.values() if g is not None))
        report.grad_norm = float(gnorm)
        if not math.isfinite(report.grad_norm):
            return self._abort(report, "non_finite_grad")
        for opt in self.optimizers:
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()
        self._check_sync()
        self._teacher_update(out["extras"])
        self.step += 1
        return report

    def _abort(self, report: LossReport, why: str) -> LossReport:
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)
        report.flags = sorted(set(report.flags) | {why})
        report.skipped = True
        log.warning("step %d aborted: %s", self.step, why)
        self.step += 1
        return report

    def _all_reduce(self) -> dict[str, torch.Tensor]:
        named = [dict(r.named_parameters()) for r in self.replicas]
        reduced = {}
        for name, p0 in named[0].items():
            if not p0.requires_grad:
                continue
            gs = [n[name].grad for n in named if n[name].grad is not None]
            if not gs:
                continue
            g = gs[0] if len(gs) == 1 and len(named) == 1 else torch.stack(
                [n[name].grad if n[name].grad is not None else torch.zeros_like(p0) for n in named]
            ).mean(0)
            for n in named:
                n[name].grad = g.clone()
            reduced[name] = g
        return reduced

    def _check_sync(self) -> None:
        if len(self.replicas) == 1:
            return
        ref = dict(self.replicas[0].named_parameters())
        for w, r in enumerate(self.replicas[1:], start=1):
            for name, p in r.named_parameters():
                if not torch.equal(p, ref[name]):
                    raise WorkerDivergenceError(f"worker {w} diverged at {name}")

    def _teacher_update(self, extras: dict) -> None:
        if "ssl" not in self.cfg.tasks:
            return
        b = self.bundle
        ssl.ema_update(b.teacher, b.teacher.student_view(b.student), b.state.momentum)
        if b.state.centering:
            b.state.centers["distill"] = ssl.update_center(
                b.state.centers["distill"], extras["dist_mean"], b.state.center_momentum)
            b.state.centers["mask"] = ssl.update_center(
                b.state.centers["mask"], extras["mask_mean"], b.state.center_momentum)

    def run(self, steps: int, log_path: str | Path | None = None) -> list[LossReport]:
        reports = []
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                r = self.train_step()
                reports.append(r)
                if fh:
                    fh.write(json.dumps(r.to_record()) + "\n")
                    fh.flush()
        finally:
            if fh:
                fh.close()
        return reports

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> None:
        b = self.bundle
        tensors = module_tensors(b.student, "student/")
        tensors.update(module_tensors(b.teacher, "teacher/"))
        for k, c in b.state.centers.items():
            tensors[f"center/{k}"] = c
        opt = self.optimizers[0]
        names = {id(p): n for n, p in b.student.named_parameters()}
        for p, st in opt.state.items():
            for k, v in st.items():
                tensors[f"optim/{names[id(p)]}/{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
        meta = {"config": self.cfg.to_dict(), "step": self.step, "epoch": self.epoch,
                "batch_in_epoch": self.batch_in_epoch}
        save_tensors(path, tensors, meta)

    @classmethod
    def restore(cls, path: str | Path, dataset: ArrayDataset | None = None) -> "Trainer":
        tensors, meta = load_tensors(path)
        cfg = TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, dataset)
        b = tr.bundle
        load_module(b.student, tensors, "student/")
        load_module(b.teacher, tensors, "teacher/")
        for k in b.state.centers:
            b.state.centers[k] = tensors[f"center/{k}"].clone()
        for r in tr.replicas[1:]:
            r.load_state_dict(b.student.state_dict())
        for r, opt in zip(tr.replicas, tr.optimizers):
            for name, p in r.named_parameters():
                keys = [k for k in tensors if k.startswith(f"optim/{name}/")]
                if keys:
                    opt.state[p] = {k.rsplit("/", 1)[1]: tensors[k].clone() for k in keys}
        tr.step, tr.epoch, tr.batch_in_epoch = meta["step"], meta["epoch"], meta["batch_in_epoch"]
        return tr
