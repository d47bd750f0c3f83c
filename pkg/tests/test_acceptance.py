"""Acceptance suite: one test per criterion, each tagged with its number.

The terminal summary (see conftest.py) prints one PASS/FAIL line per criterion.
Criteria 5, 7 and 8 train real toy models and take minutes.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from decimal import Decimal

import numpy as np
import pytest
import torch

from visionmt.analysis import EXPANSION_PATH, marginal_gain_table, run_ablation, synergy
from visionmt.autodiff import finite_difference_check
from visionmt.data.loader import ArrayDataset
from visionmt.data.synthetic import generate_synthetic_dataset
from visionmt.evaluation import EvalSuite, evaluate
from visionmt.objectives import dense, ssl
from visionmt.objectives.vl import VLParams, sigmoid_contrastive_loss
from visionmt.trainer import TrainConfig, Trainer

F64 = torch.float64
FD_SEEDS = range(10)
E2E_STEPS = 1000
PATH_STEPS = 75


def unit_rows(g, n, d):
    x = torch.randn(n, d, dtype=F64, generator=g)
    return x / x.norm(dim=-1, keepdim=True)


def fd_cases(seed):
    """(name, loss closure, params, coords) for every loss, drawn from one seed."""
    g = torch.Generator().manual_seed(seed)
    v = unit_rows(g, 4, 6).requires_grad_()
    t = unit_rows(g, 4, 6).requires_grad_()
    vp = VLParams(10.0, -10.0).double()
    yield "vl", lambda: sigmoid_contrastive_loss(v, t, vp), [v, t, vp.log_scale, vp.bias], None

    s = (0.1 * torch.randn(3, 4, 8, dtype=F64, generator=g)).requires_grad_()
    te = 0.1 * torch.randn(3, 8, dtype=F64, generator=g)
    c = 0.01 * torch.randn(8, dtype=F64, generator=g)
    yield "distill", lambda: ssl.distillation_loss(s, te, c, 0.07, 0.1), [s], None

    sm = (0.1 * torch.randn(6, 8, dtype=F64, generator=g)).requires_grad_()
    tm = 0.1 * torch.randn(6, 8, dtype=F64, generator=g)
    yield "mask", lambda: ssl.masked_prediction_loss(sm, tm, c, 0.07, 0.1)[0], [sm], None

    x = torch.randn(6, 5, dtype=F64, generator=g).requires_grad_()
    yield "koleo", lambda: ssl.koleo_loss(x), [x], None

    p = torch.rand(8, 8, dtype=F64, generator=g).requires_grad_()
    d = torch.rand(8, 8, dtype=F64, generator=g)
    r = dense.ssi_trim_residuals(p.detach(), d).reshape(-1)
    kept = torch.sort(r, stable=True).indices[:math.floor(0.9 * r.numel())]
    yield "ssitrim", lambda: dense.ssi_trim_loss(p, d), [p], [kept.tolist()]

    pg = torch.rand(16, 16, dtype=F64, generator=g).requires_grad_()
    dg = torch.rand(16, 16, dtype=F64, generator=g)
    yield "gm", lambda: dense.gradient_matching_loss(pg, dg), [pg], None

    re = unit_rows(g, 5, 6).requires_grad_()
    rt = unit_rows(g, 5, 6).requires_grad_()
    gp = VLParams(10.0, -10.0).double()
    yield "ground", lambda: dense.grounding_loss(re, rt, gp)[0], [re, rt, gp.log_scale, gp.bias], None


@pytest.mark.criterion(1)
def test_gradient_correctness():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in FD_SEEDS:
        for name, fn, params, coords in fd_cases(seed):
            err = finite_difference_check(fn, params, coords=coords,
                                          generator=torch.Generator().manual_seed(seed))
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    print(f"worst relative error per loss: {worst} ({elapsed:.1f}s)")
    assert set(worst) == {"vl", "distill", "mask", "koleo", "ssitrim", "gm", "ground"}
    assert all(e <= 1e-4 for e in worst.values()), worst
    assert elapsed < 120


@pytest.mark.criterion(2)
def test_ssi_invariance():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        d = torch.rand(16, 16, dtype=F64, generator=g)
        a = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e3))))
        b = float(rng.uniform(-100, 100))
        worst = max(worst, dense.ssi_trim_loss(d, a * d + b).item())
    elapsed = time.perf_counter() - start
    print(f"max loss {worst:.3e} ({elapsed:.2f}s)")
    assert worst < 1e-10
    assert elapsed < 5


def dyadic_map(rng):
    """4x4 integer map whose median is a half-integer and whose MAD is a power of two.

    Every intermediate of the normalized residuals is then exactly representable,
    so the comparison below is free of summation-order rounding.
    """
    while True:
        v = torch.tensor(rng.integers(0, 16, size=16), dtype=F64).reshape(4, 4)
        t, s = (x.item() for x in dense.depth_stats(v))
        if s > 0 and math.log2(s).is_integer() and (2 * t).is_integer():
            return v


def trim_oracles(pred, target, trim=0.10):
    def norm(vals):
        srt = sorted(vals)
        n = len(srt)
        med = 0.5 * (srt[n // 2 - 1] + srt[n // 2])
        mad = sum(abs(x - med) for x in vals) / n
        return [(x - med) / mad for x in vals]

    r = [abs(a - b) for a, b in zip(norm(target.reshape(-1).tolist()), norm(pred.reshape(-1).tolist()))]
    keep = math.floor((1 - trim) * len(r) + 1e-9)
    by_sort = sum(sorted(r)[:keep]) / (2 * len(r))
    # the trimmed sum is the smallest sum over any `keep` pixels
    by_subsets = min(sum(c) for c in itertools.combinations(r, keep)) / (2 * len(r))
    return by_sort, by_subsets


def koleo_oracle(x):
    xs = [[c / math.sqrt(sum(e * e for e in row)) for c in row] for row in x.tolist()]
    total = 0.0
    for i, a in enumerate(xs):
        total += math.log(max(min(math.dist(a, b) for j, b in enumerate(xs) if j != i), 1e-8))
    return -total / len(xs)


@pytest.mark.criterion(3)
def test_brute_force_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, d = dyadic_map(rng), dyadic_map(rng)
        got = dense.ssi_trim_loss(p, d).item()
        by_sort, by_subsets = trim_oracles(p, d)
        assert got == by_sort == by_subsets
    g = torch.Generator().manual_seed(0)
    for n in (2, 3, 5, 8, 16):
        for _ in range(10):
            x = torch.randn(n, 4, dtype=F64, generator=g)
            assert abs(ssl.koleo_loss(x).item() - koleo_oracle(x)) <= 1e-9
    assert time.perf_counter() - start < 5


@pytest.mark.criterion(4)
def test_worker_equivalence():
    start = time.perf_counter()
    data = ArrayDataset(generate_synthetic_dataset(0, 64))
    base = dict(precision="float64", n_train=64, warmup_steps=0, lr=1e-3)
    ref = Trainer(TrainConfig(**base, batch_size=16), data)
    ref_totals = [ref.train_step().total for _ in range(2)]
    ref_params = dict(ref.model.named_parameters())
    for workers in (1, 2, 4):
        t = Trainer(TrainConfig(**base, batch_size=16 // workers, workers=workers), data)
        for want in ref_totals:
            assert abs(t.train_step().total - want) <= 1e-6
        for name, p in t.model.named_parameters():
            assert (p - ref_params[name]).abs().max().item() <= 1e-6, name
    elapsed = time.perf_counter() - start
    print(f"W in (1, 2, 4) match ({elapsed:.1f}s)")
    assert elapsed < 120


def final_teacher_entropy(centering: bool, steps=500, window=100) -> float:
    t = Trainer(TrainConfig(tasks="ssl", seed=0, steps=steps, centering=centering))
    reports = t.run(steps)
    return float(np.mean([r.teacher_entropy for r in reports[-window:]]))


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_collapse_sentinel():
    start = time.perf_counter()
    ln_k = math.log(TrainConfig().prototypes)
    with_c = final_teacher_entropy(True)
    without_c = final_teacher_entropy(False)
    elapsed = time.perf_counter() - start
    print(f"teacher entropy: centered {with_c:.3f}, uncentered {without_c:.3f}, "
          f"ln K {ln_k:.3f} ({elapsed:.0f}s)")
    assert with_c >= 0.5 * ln_k
    assert without_c < 0.1 * ln_k
    assert elapsed < 600


@pytest.mark.criterion(6)
def test_analytics_exactness():
    start = time.perf_counter()
    grid = marginal_gain_table([36.2, 43.7, 49.0, 49.7])
    assert [grid.increments[i]["value"] for i in (1, 2, 3)] == [Decimal("7.5"), Decimal("5.3"), Decimal("0.7")]
    assert grid.gain["value"] == Decimal("13.5")
    assert synergy(1, 1, 2) == 100.0
    assert abs(synergy(2, 3, 4) - 33.33) <= 0.01
    assert time.perf_counter() - start < 1


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_end_to_end_learning():
    start = time.perf_counter()
    t = Trainer(TrainConfig(seed=0, steps=E2E_STEPS))
    assert len(t.data) == 10_000
    t.run(E2E_STEPS)
    train_time = time.perf_counter() - start
    ev = {k: v.value for k, v in evaluate(t.model, EvalSuite.build()).items()}
    print(f"{ev} (train {train_time:.0f}s)")
    assert train_time <= 1800
    assert ev["zeroshot_acc"] >= 0.80
    assert ev["recall_i2t"] >= 0.50 and ev["recall_t2i"] >= 0.50
    assert ev["depth_rmse"] < ev["depth_baseline"]


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_expansion_path_trend():
    start = time.perf_counter()
    out = run_ablation(TrainConfig(steps=PATH_STEPS), seeds=(0, 1, 2), subsets=EXPANSION_PATH,
                       budget_seconds=7200)
    elapsed = time.perf_counter() - start
    assert not out.partial
    zs = [float(v["zeroshot_acc"]) for v in out.grid.values]
    rmse = [float(v["depth_rmse"]) for v in out.grid.values]
    print(f"mean zero-shot {zs}, mean depth rmse {rmse} ({elapsed:.0f}s)")
    assert zs[1] > zs[0]
    assert rmse[3] <= rmse[2]
    assert elapsed <= 7200


def small_cfg(**kw) -> TrainConfig:
    return TrainConfig(**{**dict(n_train=256, batch_size=32, steps=20, warmup_steps=5), **kw})


@pytest.mark.criterion(9)
def test_determinism_and_resume(tmp_path):
    data = ArrayDataset(generate_synthetic_dataset(0, 256))
    suite = EvalSuite.build(n_zeroshot=50, n_pairs=20, n_probe_train=50, n_probe_eval=20)
    logs = []
    for k in range(2):
        t = Trainer(small_cfg(), data)
        t.run(12, tmp_path / f"log{k}.jsonl")
        ev = evaluate(t.model, suite)
        logs.append(((tmp_path / f"log{k}.jsonl").read_bytes(),
                     json.dumps({n: r.to_record() for n, r in ev.items()}, sort_keys=True)))
    assert logs[0] == logs[1]

    def stream(reports):
        return [json.dumps(r.to_record(), sort_keys=True) for r in reports]

    whole = stream(Trainer(small_cfg(), data).run(20))
    part = Trainer(small_cfg(), data)
    head = stream(part.run(11))  # 256 / 32 = 8 steps per epoch, so the resume crosses an epoch
    part.save(tmp_path / "mid.ckpt")
    tail = stream(Trainer.restore(tmp_path / "mid.ckpt", data).run(9))
    assert head + tail == whole
