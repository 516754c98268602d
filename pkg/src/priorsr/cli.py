"""Command-line entry point: ``priorsr <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .constraints import DataStats, catalog, check, save_catalog
from .datagen import add_noise, make_dataset, save_csv, subsample
from .expr import ExprSyntaxError, parse
from .pipeline import RunConfig, evaluate, load_data, run
from .pool import CheckpointError, ExperiencePool
from .refine import RepairRecord


def _cmd_run(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    resume = None
    if args.resume:
        resume = Path(cfg.output_dir) / "checkpoint.jsonl"
        if not resume.exists():
            print(f"error: no checkpoint at {resume}", file=sys.stderr)
            return 2
    rep = run(cfg, resume=resume)
    print(rep.format())
    print(f"outputs: {cfg.output_dir}")
    return 0


def _cmd_eval(args) -> int:
    pool = ExperiencePool.load(args.checkpoint)
    best = pool.best(valid_only=True) or pool.best()
    if best is None:
        print("checkpoint holds no candidates", file=sys.stderr)
        return 1
    cfg_data = pool.state.get("config", {})
    if args.data:
        cfg = RunConfig(system=args.system, data_path=args.data)
    else:
        keep = {k: cfg_data[k] for k in ("noise_sigma", "noise_seed", "subsample_fraction", "subsample_seed")
                if k in cfg_data}
        cfg = RunConfig(system=args.system, **keep)
    d = load_data(cfg)
    nid, nood = evaluate(best.expr, best.params, d)
    print(f"best: {best.text}")
    print(f"params: {[float(p) for p in best.params]}")
    print(f"valid: {int(best.valid)}  score (-MSE train): {best.score_mse:.6g}")
    print(f"NMSE id: {nid:.6g}  ood: {nood:.6g}")
    return 0


def _cmd_gen_data(args) -> int:
    d = make_dataset(args.system)
    if args.noise:
        d = add_noise(d, args.noise, args.seed)
    if args.fraction < 1.0:
        d = subsample(d, args.fraction, args.seed)
    save_csv(d, args.out)
    counts = {tag: int(np.sum(d.split == tag)) for tag in ("train", "id_val", "ood_val")}
    print(f"wrote {len(d.y)} rows to {args.out} {counts}")
    return 0


def _cmd_check(args) -> int:
    try:
        expr = parse(args.expr)
    except ExprSyntaxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    params = [float(p) for p in args.params.split(",")] if args.params else []
    cs = catalog(args.system, args.mode)
    d = make_dataset(args.system)
    rep = check(expr, params, cs, DataStats.from_dataset(d, noise_sigma=args.noise or None))
    print(f"system: {args.system}  mode: {args.mode}")
    print(f"expr: {args.expr}")
    print(rep.format())
    return 0 if rep.valid else 1


def _cmd_insights(args) -> int:
    pool = ExperiencePool.load(args.checkpoint)
    if not pool.insights:
        print("no insights recorded")
    for i, ins in enumerate(pool.insights):
        print(f"[{i}] {ins.kind} (island {ins.island}, sample {ins.created_at})")
        print(f"    {ins.text}")
    if args.history:
        for h in pool.refine_history:
            print(f"refined: {h['original']}  ->  {h['improved']}")
            print(f"    {h['explanation']}")
        for rec in pool.repair_records:
            print(f"repair {RepairRecord.from_dict(rec).render()}")
    return 0


def _cmd_catalog(args) -> int:
    cs = catalog(args.system, args.mode)
    if args.out:
        save_catalog(cs, args.out)
        print(f"wrote {len(cs.checks)} checks to {args.out}")
    else:
        print(json.dumps(cs.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorsr", description="Prior-constrained symbolic regression")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run (or resume) a search")
    r.add_argument("--config", required=True, help="JSON file with RunConfig fields")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--resume", action="store_true", help="continue from <output_dir>/checkpoint.jsonl")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="score the best candidate of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--system", required=True)
    e.add_argument("--data", help="CSV to evaluate on instead of regenerated data")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gen-data", help="write a benchmark dataset as CSV")
    g.add_argument("--system", required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fraction", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    c = sub.add_parser("check", help="run a constraint catalog on one expression")
    c.add_argument("--system", required=True)
    c.add_argument("--expr", required=True)
    c.add_argument("--params", default="")
    c.add_argument("--mode", choices=("pointwise", "statistical"), default="pointwise")
    c.add_argument("--noise", type=float, default=0.0, help="noise level assumed by statistical mode")
    c.set_defaults(func=_cmd_check)

    i = sub.add_parser("insights", help="print the insight pool of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--history", action="store_true", help="also print refinement and repair records")
    i.set_defaults(func=_cmd_insights)

    k = sub.add_parser("catalog", help="export a constraint catalog as JSON")
    k.add_argument("--system", required=True)
    k.add_argument("--mode", choices=("pointwise", "statistical"), default="pointwise")
    k.add_argument("--out")
    k.set_defaults(func=_cmd_catalog)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
