"""Command-line entry point: ``gosh <subcommand> ...``.

Failures exit nonzero with a one-line JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .sim import ConfigurationError


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def _floats(text):
    return [float(s) for s in text.split(",") if s.strip()]


def _config(args):
    cfg = P.load_config(args.config)
    if getattr(args, "intervals", None) and args.cmd != "gen-dataset":
        cfg["intervals"] = args.intervals
    return cfg


def cmd_gen_dataset(args):
    cfg = _config(args)
    ds = P.gen_dataset(cfg, args.intervals, seed=args.seed, starred=args.starred,
                       checkpoints=args.checkpoints)
    ds.save(args.out)
    return {"records": len(ds), "path": str(args.out), "config_hash": P.config_hash(cfg)}


def cmd_train(args):
    ds = P.Dataset.load(args.dataset)
    tcfg = P.load_config(args.config)["training"] if args.config else {}
    for key in ("lr", "weight_decay", "epochs", "patience", "batch_size"):
        val = getattr(args, key)
        if val is not None:
            tcfg[key] = val
    reports = P.train_all(ds, args.out, kinds=args.models.split(","), folds=args.folds,
                          seed=args.seed, tcfg=tcfg, grid=args.grid)
    return {"out": str(args.out),
            "models": {k: {m: v[m] for m in ("mean_mse", "mean_kld") if m in v}
                       for k, v in reports.items()}}


def cmd_run(args):
    cfg = _config(args)
    res = P.run_experiment(cfg, args.kind, seeds=args.seeds, checkpoints=args.checkpoints,
                           out_dir=args.out, allow_untrained=args.allow_untrained)
    return {"kind": res["kind"], "out": str(args.out), "mean": res["mean"]}


def cmd_compare(args):
    res = P.compare(args.runs, args.out)
    return {"out": str(args.out), "table": res["table"]}


def cmd_sweep_k(args):
    cfg = _config(args)
    res = P.sweep_k(cfg, ks=args.ks, seeds=args.seeds, checkpoints=args.checkpoints,
                    out_dir=args.out, allow_untrained=args.allow_untrained)
    keys = ("response_time_mean", "recovery_intervals", "recovery_slope")
    return {lab: {key: v[key] for key in keys} for lab, v in res.items()}


def build_parser():
    p = _Parser(prog="gosh", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-dataset", help="record (state, decision, objective) from random placement")
    g.add_argument("--config", required=True, help="config path or bundled profile (desk10, desk50)")
    g.add_argument("--intervals", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--starred", action="store_true", help="also record the co-simulated objective")
    g.add_argument("--checkpoints", type=Path, help="GOSH checkpoints for --starred")
    g.add_argument("--out", type=Path, required=True, help="dataset CSV path")
    g.set_defaults(fn=cmd_gen_dataset)

    t = sub.add_parser("train", help="five-fold training of surrogates and the state predictor")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--config", help="take training hyperparameters from this config")
    t.add_argument("--models", default="npn,fcn,lstm", help="comma list of npn, fcn, lstm")
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grid", action="store_true", help="grid-search lr and weight decay first")
    t.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("run", help="run one scheduler over every seed")
    r.add_argument("--config", required=True)
    r.add_argument("--kind", help="scheduler kind (defaults to the config's)")
    r.add_argument("--seeds", type=_seeds, help="comma list, e.g. 0,1,2")
    r.add_argument("--intervals", type=int)
    r.add_argument("--checkpoints", type=Path)
    r.add_argument("--allow-untrained", action="store_true")
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="tabulate completed runs against the first")
    c.add_argument("runs", nargs="+", type=Path)
    c.add_argument("--out", type=Path, required=True)
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep-k", help="static exploration factors against the dynamic rule")
    s.add_argument("--config", required=True)
    s.add_argument("--ks", type=_floats, default=[0.5, 2.0, 5.0, 10.0])
    s.add_argument("--seeds", type=_seeds)
    s.add_argument("--intervals", type=int)
    s.add_argument("--checkpoints", type=Path)
    s.add_argument("--allow-untrained", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(fn=cmd_sweep_k)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except (ConfigurationError, FileNotFoundError, ValueError, OSError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.cmd, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
