"""Command-line entry point.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures
(bad config, missing files, training errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
        cfg.train.validate()
    return cfg


def _progress(every: int):
    def report(t, terms):
        if every and (t + 1) % every == 0:
            print(f"step {t + 1}: total={terms.total:.5g} nll1={terms.nll_task1:.5g} "
                  f"nll2={terms.nll_task2:.5g}", file=sys.stderr)
    return report


def cmd_train(args) -> int:
    from .analysis import run_experiment

    cfg = _load(args)
    run_dir = Path(args.run_dir or cfg.output_dir or "runs/default")
    _, result, test = run_experiment(cfg, run_dir, _progress(args.log_every))
    print(json.dumps({"run_dir": str(run_dir), "best_step": result.best_step, "test": test}, indent=1))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import analyze_grouping

    prop, traj = analyze_grouping(args.run_dir, args.out)
    print(f"wrote {prop}\nwrote {traj}")
    return EXIT_OK


def cmd_activations(args) -> int:
    from . import data
    from .analysis import export_activations, load_run_model, make_splits

    cfg, model = load_run_model(args.run_dir, args.checkpoint)
    if args.input:
        ds = data.load(args.input)
    else:
        ds = make_splits(cfg)[2]
    images = ds.images[:args.count]
    out = Path(args.out) if args.out else Path(args.run_dir) / "activations"
    index = export_activations(model, images, out, args.entropy_quantile)
    print(f"wrote {len(index)} kernel maps under {out}")
    return EXIT_OK


def cmd_init_sweep(args) -> int:
    from .analysis import SWEEP_SCHEMES, init_sweep

    cfg = _load(args)
    report = init_sweep(cfg, args.out, args.schemes or SWEEP_SCHEMES, _progress(args.log_every))
    print(json.dumps(report["pairwise_l1"], indent=1))
    return EXIT_OK


def cmd_duplicate(args) -> int:
    from .analysis import duplicate_task

    cfg = _load(args)
    report = duplicate_task(cfg, args.out, args.seeds, _progress(args.log_every))
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .analysis import load_run_model, make_splits
    from .train import evaluate

    cfg, model = load_run_model(args.run_dir, args.checkpoint)
    test = make_splits(cfg)[2]
    passes = args.passes or cfg.train.mc_passes
    m = evaluate(model, test, passes, cfg.train.final_tau,
                 np.random.default_rng([cfg.train.sampler_seed, 0x7E57]), args.hard or cfg.train.mc_hard)
    print(json.dumps(m, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_make_data(args) -> int:
    from . import data

    ds = data.generate(args.kind, args.n, args.height, args.width, args.seed)
    print(f"wrote {data.save(ds, args.out)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfgnet", description="Train and analyse stochastic filter group networks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment YAML file (default: built-in faces/sfg config)")
            sp.add_argument("--seed", type=int, help="override every seed in the config")
            sp.add_argument("--steps", type=int, help="override the training step budget")
            sp.add_argument("--log-every", type=int, default=0, help="print progress every N steps")

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--run-dir", help="output run directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("analyze-grouping", help="proportion and trajectory CSVs from snapshots")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--out", help="output directory (default RUN_DIR/analysis)")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("activations", help="export activation maps per layer and group")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--input", help="dataset file to draw inputs from (default: test split)")
    sp.add_argument("--count", type=int, default=16, help="number of input images")
    sp.add_argument("--entropy-quantile", type=float, default=0.2)
    sp.add_argument("--checkpoint", default="final", choices=("final", "best"))
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_activations)

    sp = sub.add_parser("init-sweep", help="compare grouping initialisation schemes")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--schemes", nargs="+")
    sp.set_defaults(fn=cmd_init_sweep)

    sp = sub.add_parser("duplicate-task", help="train with two copies of the dense regression task")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.set_defaults(fn=cmd_duplicate)

    sp = sub.add_parser("eval", help="Monte-Carlo evaluation of a trained run on its test split")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--checkpoint", default="best", choices=("final", "best"))
    sp.add_argument("--passes", type=int)
    sp.add_argument("--hard", action="store_true", help="hard (one-hot) samples at test time")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("make-data", help="generate a synthetic dataset file")
    sp.add_argument("--kind", choices=("faces", "scans"), required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"sfgnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as e:
        print(f"sfgnet: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
