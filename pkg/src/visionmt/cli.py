"""Command-line entry point: gen-data, train, eval, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import build_train_config, merge, read_config, section_values

log = logging.getLogger("visionmt")


class CliError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        emit_error("usage", message)
        sys.exit(2)


def emit_error(kind: str, message: str) -> None:
    print(json.dumps({"status": "error", "error": kind, "message": message}), file=sys.stderr)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file; its values win over flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", help="comma list from vl,ssl,ground,depth")
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--data", dest="data_dir", help="dataset directory written by gen-data")
    p.add_argument("--precision", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="visionmt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as shards")
    _common(p)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--shard-size", type=int, default=1000)
    p.add_argument("--name", default="train")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _train_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate", help="train and evaluate every task subset")
    _common(p)
    _train_flags(p)
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--subsets", choices=("all", "path"), default="all",
                   help="all VL-containing subsets, or only the expansion path")
    p.add_argument("--budget-minutes", type=float)
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("report", help="rebuild tables from a runs.jsonl file")
    _common(p)
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    return parser


def _cli_train_values(args) -> dict:
    keys = ("tasks", "workers", "steps", "batch_size", "n_train", "data_dir", "precision", "seed")
    return {k: getattr(args, k, None) for k in keys}


def _require_out(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_gen_data(args, cp) -> dict:
    from .data.shards import write_dataset
    from .data.synthetic import GENERATOR_VERSION, generate_synthetic_dataset

    vals = merge(section_values(cp, "data"), {"seed": args.seed if args.seed is not None else 0,
                                              "n": args.n})
    seed, n = int(vals["seed"]), int(vals["n"])
    out = _require_out(args)
    samples = generate_synthetic_dataset(seed, n)
    manifest = write_dataset(out, samples, seed, GENERATOR_VERSION, args.shard_size, args.name)
    return {"manifest": str(manifest), "samples": n}


def cmd_train(args, cp) -> dict:
    from .trainer import Trainer

    out = _require_out(args)
    if args.resume is not None:
        trainer = Trainer.restore(args.resume)
        steps = trainer.cfg.steps - trainer.step if args.steps is None else args.steps
    else:
        trainer = Trainer(build_train_config(cp, _cli_train_values(args)))
        steps = trainer.cfg.steps
    reports = trainer.run(steps, out / "train_log.jsonl")
    trainer.save(out / "model.ckpt")
    skipped = sum(r.skipped for r in reports)
    return {"checkpoint": str(out / "model.ckpt"), "steps": trainer.step, "skipped": skipped}


def cmd_eval(args, cp) -> dict:
    from .evaluation import EvalSuite, evaluate
    from .trainer import Trainer

    vals = section_values(cp, "eval")
    seed = int(merge(vals, {"seed": args.seed if args.seed is not None else 1234})["seed"])
    trainer = Trainer.restore(args.checkpoint)
    results = evaluate(trainer.model, EvalSuite.build(seed=seed, dtype=trainer.cfg.dtype),
                       checkpoint=str(args.checkpoint), seed=seed)
    lines = [json.dumps(r.to_record()) for r in results.values()]
    for line in lines:
        print(line)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.jsonl").write_text("\n".join(lines) + "\n")
    return {"metrics": {k: r.value for k, r in results.items()}}


def cmd_ablate(args, cp) -> dict:
    from .analysis import EXPANSION_PATH, run_ablation

    out = _require_out(args)
    vals = merge(section_values(cp, "ablate"), {
        "seeds": args.seeds, "subsets": args.subsets, "budget_minutes": args.budget_minutes})
    seeds = [int(s) for s in str(vals["seeds"]).split(",") if s.strip()]
    subsets = EXPANSION_PATH if vals["subsets"] == "path" else None
    budget = float(vals["budget_minutes"]) * 60 if vals.get("budget_minutes") is not None else None
    cli = _cli_train_values(args)
    cli.pop("seed")
    base = build_train_config(cp, cli)
    res = run_ablation(base, seeds, subsets, out, budget, plot=args.plot)
    return {"runs": len(res.runs), "partial": res.partial,
            "files": {k: str(v) for k, v in res.files.items()}}


def cmd_report(args, cp) -> dict:
    from .analysis import RunResult, write_reports

    out = _require_out(args)
    if not args.runs.exists():
        raise FileNotFoundError(f"runs file not found: {args.runs}")
    runs = [RunResult.from_record(json.loads(line))
            for line in args.runs.read_text().splitlines() if line.strip()]
    files = write_reports(out, runs, args.plot)
    return {"files": {k: str(v) for k, v in files.items()}}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = read_config(args.config)
        result = COMMANDS[args.command](args, cp)
    except (CliError, ValueError, OSError, KeyError, RuntimeError) as e:
        emit_error(type(e).__name__, str(e))
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
