"""Command line entry point: gen-data | train | sweep | eval | project."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import DatasetError, SyntheticSpec, generate_synthetic, \
    load_features, save_features
from .experiment import default_output_root, evaluate_checkpoint, \
    load_run_config, project_checkpoint, run_experiment, run_sweep
from .trainer import ConfigError


def cmd_gen_data(args):
    spec = {}
    if args.spec:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    for item in args.set or ():
        key, _, raw = item.partition("=")
        spec[key] = json.loads(raw)
    ds = generate_synthetic(SyntheticSpec(**spec))
    save_features(ds, args.out)
    print(f"wrote {len(ds)} samples x {ds.feature_dim} features "
          f"({ds.class_count} classes) to {args.out}")
    return 0


def cmd_train(args):
    run_cfg = load_run_config(args.config, args.set)
    if args.name:
        run_cfg["name"] = args.name
    root = Path(args.out) if args.out else Path(
        run_cfg.get("output") or default_output_root())
    run_dir = root / run_cfg["name"]
    report = run_experiment(run_cfg, run_dir)
    test = report["test"]
    print(f"run directory: {run_dir}")
    print(f"test Recall@1={test['recall_at'].get('1')} NMI={test['nmi']:.4f} "
          f"mARP={test['marp']:.4f} ED={test['effective_dim']}")
    return 0


def cmd_sweep(args):
    plan = json.loads(Path(args.plan).read_text(encoding="utf-8"))
    rows, failed = run_sweep(plan, args.out, args.resume)
    print(f"{len(rows)} runs, {failed} failed")
    return 0 if failed == 0 else 1


def _dataset_arg(args):
    return load_features(args.data) if args.data else None


def cmd_eval(args):
    report = evaluate_checkpoint(args.checkpoint, _dataset_arg(args))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_project(args):
    project_checkpoint(args.checkpoint, args.out, _dataset_arg(args))
    print(f"wrote projection to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="divconq",
        description="Divide-and-conquer metric learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic feature CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="JSON file with generator fields")
    g.add_argument("--set", action="append", metavar="FIELD=VALUE")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run and write its artifacts")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override, e.g. k_max=1 or trainer.lambda=0.2")
    t.add_argument("--name", help="run name (directory under the output root)")
    t.add_argument("--out", help="output root (default $DIVCONQ_OUTPUT_ROOT "
                                 "or ./runs)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run every entry of a plan file")
    s.add_argument("--plan", required=True)
    s.add_argument("--out", help="output root (overrides the plan)")
    s.add_argument("--resume", action="store_true",
                   help="skip runs that already have a report")
    s.set_defaults(func=cmd_sweep)

    for name, func, hint in (("eval", cmd_eval, "MetricsReport JSON"),
                             ("project", cmd_project, "2-D PCA CSV")):
        e = sub.add_parser(name, help=f"{hint} for a checkpoint")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="feature CSV (default: the run's "
                                      "held-out split)")
        e.add_argument("--out", required=(name == "project"))
        e.set_defaults(func=func)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"divconq {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
