"""Task-expansion tables, pairwise synergy and the ablation runner."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from pathlib import Path

from .evaluation import LOWER_IS_BETTER, METRICS, EvalSuite, evaluate
from .trainer import TASKS, TrainConfig, Trainer

log = logging.getLogger(__name__)

EXPANSION_PATH = (("vl",), ("vl", "ssl"), ("vl", "ssl", "ground"), ("vl", "ssl", "ground", "depth"))
PAIR_TASKS = ("ssl", "ground", "depth")
DECIMAL_PREC = 800  # wide enough that the difference of any two doubles is exact


class ConfigMismatchError(ValueError):
    pass


def synergy(d_a: float, d_b: float, d_ab: float) -> float | None:
    """Relative extra gain of the combination over the better single task, in percent.

    Returns None (undefined) when the better single gain is exactly zero.
    """
    best = max(d_a, d_b)
    if best == 0:
        return None
    return 100.0 * (d_ab - best) / best


def _dec(x) -> Decimal:
    # repr gives the shortest round-tripping literal, so 43.7 becomes Decimal("43.7")
    return x if isinstance(x, Decimal) else Decimal(repr(float(x)))


def task_label(tasks) -> str:
    tasks = tuple(tasks)
    if tasks == ("vl",):
        return "VL"
    return "VL+" + "+".join(t for t in tasks if t != "vl")


@dataclass
class RunResult:
    tasks: tuple[str, ...]
    seed: int | None
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    @property
    def label(self) -> str:
        return task_label(self.tasks)

    def to_record(self) -> dict:
        return {"tasks": list(self.tasks), "seed": self.seed, "metrics": self.metrics,
                "config": self.config, "flags": list(self.flags)}

    @classmethod
    def from_record(cls, d: dict) -> "RunResult":
        return cls(tuple(d["tasks"]), d["seed"], dict(d["metrics"]), dict(d.get("config", {})),
                   tuple(d.get("flags", ())))


def _comparable(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in ("tasks", "seed", "data_seed")}


def check_compatible(runs: list[RunResult]) -> None:
    if not runs:
        return
    ref = _comparable(runs[0].config)
    for r in runs[1:]:
        cur = _comparable(r.config)
        if cur != ref:
            diff = sorted(k for k in set(ref) | set(cur) if ref.get(k) != cur.get(k))
            raise ConfigMismatchError(f"{r.label} differs from {runs[0].label} in {diff}")


@dataclass
class AblationGrid:
    labels: list[str]
    metrics: list[str]
    values: list[dict[str, Decimal]]
    increments: list[dict[str, Decimal | None]]   # None on the first row
    gain: dict[str, Decimal]

    def improved(self, row: int, metric: str) -> bool | None:
        inc = self.increments[row][metric]
        if inc is None:
            return None
        return inc < 0 if metric in LOWER_IS_BETTER else inc > 0

    def rows(self) -> list[list[str]]:
        head = ["tasks"] + [c for m in self.metrics for c in (m, f"{m}_inc")]
        out = [head]
        for label, vals, incs in zip(self.labels, self.values, self.increments):
            row = [label]
            for m in self.metrics:
                row.append(str(vals[m]))
                row.append("" if incs[m] is None else f"{incs[m]:+}")
            out.append(row)
        out.append(["gain"] + [c for m in self.metrics for c in ("", f"{self.gain[m]:+}")])
        return out


def marginal_gain_table(runs, metrics=None, labels=None) -> AblationGrid:
    """Per-row increments over the previous row plus the absolute gain first->last.

    `runs` is either a list of RunResult (checked for matching configs) or a
    list of plain numbers for a single unnamed metric. Arithmetic is decimal,
    so the increments telescope to the gain exactly.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs")
    if not isinstance(runs[0], RunResult):
        metrics = list(metrics or ["value"])[:1]
        runs = [RunResult(("vl",), None, {metrics[0]: v}) for v in runs]
        labels = labels or [str(i) for i in range(len(runs))]
    check_compatible(runs)
    metrics = list(metrics or [m for m in METRICS if all(m in r.metrics for r in runs)])
    values = [{m: _dec(r.metrics[m]) for m in metrics} for r in runs]
    increments: list[dict] = [{m: None for m in metrics}]
    with localcontext() as ctx:
        ctx.prec = DECIMAL_PREC
        for prev, cur in zip(values, values[1:]):
            increments.append({m: cur[m] - prev[m] for m in metrics})
        gain = {m: values[-1][m] - values[0][m] for m in metrics}
    return AblationGrid(labels or [r.label for r in runs], metrics, values, increments, gain)


@dataclass
class SynergyRow:
    metric: str
    task_a: str
    task_b: str
    d_a: float
    d_b: float
    d_ab: float
    percent: float | None


@dataclass
class SynergyTable:
    rows: list[SynergyRow]

    def lookup(self, metric: str, a: str, b: str) -> SynergyRow:
        for r in self.rows:
            if r.metric == metric and {r.task_a, r.task_b} == {a, b}:
                return r
        raise KeyError((metric, a, b))

    def as_rows(self) -> list[list[str]]:
        out = [["metric", "task_a", "task_b", "delta_a", "delta_b", "delta_ab", "synergy_pct"]]
        for r in self.rows:
            pct = "undefined" if r.percent is None else f"{r.percent:.2f}"
            out.append([r.metric, r.task_a, r.task_b, f"{r.d_a:.6g}", f"{r.d_b:.6g}",
                        f"{r.d_ab:.6g}", pct])
        return out


def gain_over_baseline(metric: str, value: float, baseline: float) -> float:
    """Improvement over the VL baseline, positive = better for every metric."""
    return baseline - value if metric in LOWER_IS_BETTER else value - baseline


def synergy_table(runs: list[RunResult], metrics=None) -> SynergyTable:
    by_tasks = {tuple(r.tasks): r for r in runs}
    base = by_tasks.get(("vl",))
    if base is None:
        raise ValueError("synergy needs the VL-only baseline run")
    metrics = list(metrics or [m for m in METRICS if m in base.metrics])

    def key(*extra):
        return tuple(t for t in TASKS if t == "vl" or t in extra)

    rows = []
    for a, b in itertools.combinations(PAIR_TASKS, 2):
        ra, rb, rab = by_tasks.get(key(a)), by_tasks.get(key(b)), by_tasks.get(key(a, b))
        if ra is None or rb is None or rab is None:
            continue
        for m in metrics:
            g = [gain_over_baseline(m, r.metrics[m], base.metrics[m]) for r in (ra, rb, rab)]
            rows.append(SynergyRow(m, a, b, *g, synergy(*g)))
    return SynergyTable(rows)


def average_runs(runs: list[RunResult]) -> list[RunResult]:
    """Mean metrics per task set across seeds, in first-seen order."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in runs:
        groups.setdefault(tuple(r.tasks), []).append(r)
    out = []
    for tasks, rs in groups.items():
        keys = set.intersection(*(set(r.metrics) for r in rs))
        mean = {m: sum(r.metrics[m] for r in rs) / len(rs) for m in sorted(keys)}
        flags = tuple(sorted({f for r in rs for f in r.flags}))
        out.append(RunResult(tasks, None, mean, _comparable(rs[0].config), flags))
    return out


def ablation_subsets() -> list[tuple[str, ...]]:
    """Every task set containing VL: the expansion path plus all pairs."""
    out = []
    for k in range(len(PAIR_TASKS) + 1):
        for extra in itertools.combinations(PAIR_TASKS, k):
            out.append(tuple(t for t in TASKS if t == "vl" or t in extra))
    return out


def train_and_evaluate(cfg: TrainConfig, suite: EvalSuite, out_dir: Path | None = None,
                       dataset=None) -> RunResult:
    trainer = Trainer(cfg, dataset)
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    trainer.run(cfg.steps, log_path)
    name = f"{task_label(cfg.tasks)}-seed{cfg.seed}"
    ev = evaluate(trainer.model, suite, checkpoint=name, seed=cfg.seed)
    metrics = {m: ev[m].value for m in METRICS}
    metrics["depth_baseline"] = ev["depth_baseline"].value
    flags = tuple(sorted({f for r in ev.values() for f in r.flags}))
    if out_dir is not None:
        trainer.save(out_dir / "model.ckpt")
        with open(out_dir / "eval.jsonl", "w") as f:
            for r in ev.values():
                f.write(json.dumps(r.to_record()) + "\n")
    return RunResult(cfg.tasks, cfg.seed, metrics, cfg.to_dict(), flags)


def write_table(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f, delimiter="\t", lineterminator="\n").writerows(rows)


def write_reports(out_dir: Path, runs: list[RunResult], plot: bool = False) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    mean = average_runs(runs)
    by_tasks = {tuple(r.tasks): r for r in mean}
    path = [by_tasks[t] for t in EXPANSION_PATH if t in by_tasks]
    files = {}
    if path:
        grid = marginal_gain_table(path)
        files["expansion"] = out_dir / "expansion.tsv"
        write_table(files["expansion"], grid.rows())
    if ("vl",) in by_tasks:
        table = synergy_table(mean)
        files["synergy"] = out_dir / "synergy.tsv"
        write_table(files["synergy"], table.as_rows())
    files["runs"] = out_dir / "runs.jsonl"
    with open(files["runs"], "w") as f:
        for r in runs:
            f.write(json.dumps(r.to_record()) + "\n")
    if plot and path:
        files["plot"] = plot_expansion(out_dir / "expansion.png", path)
    return files


def plot_expansion(dest: Path, path: list[RunResult]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = [m for m in METRICS if m in path[0].metrics]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3))
    for ax, m in zip(axes, metrics):
        ax.plot(range(len(path)), [r.metrics[m] for r in path], marker="o")
        ax.set_xticks(range(len(path)), [r.label for r in path], rotation=30, ha="right", fontsize=7)
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    fig.savefig(dest, dpi=100)
    plt.close(fig)
    return dest


@dataclass
class AblationOutcome:
    runs: list[RunResult]
    grid: AblationGrid | None
    synergy: SynergyTable | None
    files: dict[str, Path]
    partial: bool


def run_ablation(base: TrainConfig, seeds=(0,), subsets=None, out_dir: str | Path | None = None,
                 budget_seconds: float | None = None, suite: EvalSuite | None = None,
                 plot: bool = False) -> AblationOutcome:
    """Train and evaluate every task subset for every seed, sequentially.

    Runs still pending when the wall-clock budget runs out are skipped and the
    outcome is marked partial.
    """
    subsets = [tuple(s) for s in (subsets or ablation_subsets())]
    suite = suite or EvalSuite.build()
    out = Path(out_dir) if out_dir is not None else None
    start = time.monotonic()
    runs, partial = [], False
    for seed in seeds:
        for tasks in subsets:
            if budget_seconds is not None and time.monotonic() - start > budget_seconds:
                log.warning("budget exhausted before %s seed %d", task_label(tasks), seed)
                partial = True
                continue
            cfg = TrainConfig.from_dict({**base.to_dict(), "tasks": tasks, "seed": seed})
            run_dir = out / f"{task_label(tasks)}-seed{seed}" if out is not None else None
            log.info("training %s seed %d", task_label(tasks), seed)
            runs.append(train_and_evaluate(cfg, suite, run_dir))
    if partial:
        runs = [RunResult(r.tasks, r.seed, r.metrics, r.config, r.flags + ("partial",)) for r in runs]
    mean = average_runs(runs)
    by_tasks = {tuple(r.tasks): r for r in mean}
    path = [by_tasks[t] for t in EXPANSION_PATH if t in by_tasks]
    grid = marginal_gain_table(path) if path else None
    syn = synergy_table(mean) if ("vl",) in by_tasks else None
    files = write_reports(out, runs, plot) if out is not None else {}
    return AblationOutcome(runs, grid, syn, files, partial)
