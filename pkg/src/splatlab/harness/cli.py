"""Command-line entry point.

Subcommands: gen, train, eval, gradcheck, ablate, bench.
Exit codes: 0 success, 1 usage/configuration error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .. import __version__, backend_name
from ..splat import load_cloud
from .bench import bench_backends, format_results
from .config import load_config
from .gradcheck import format_rows, run_gradcheck
from .train import Dataset, Report, TrainAbort, evaluate_checkpoint, generate_dataset, train

ABLATION_MODES = {
    "baseline": {"ablation.illum": "false", "ablation.normal": "false"},
    "illum_only": {"ablation.illum": "true", "ablation.normal": "false"},
    "normal_only": {"ablation.illum": "false", "ablation.normal": "true"},
    "full": {"ablation.illum": "true", "ablation.normal": "true"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _add_common(p):
    p.add_argument("--config", help="INI-style run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="fix all randomness")
    p.add_argument("--out", help="output directory (overrides [output] dir)")


def _config_from(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"output.dir={args.out}")
    if getattr(args, "iters", None):
        overrides.append(f"train.iterations={args.iters}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = _Parser(prog="splatlab",
                     description="Gaussian-splatting surface reconstruction lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="emit a synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train", help="run the optimization")
    _add_common(p)
    p.add_argument("--iters", type=int, help="shorthand for train.iterations")

    p = sub.add_parser("eval", help="Chamfer of a checkpoint against ground truth")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help="test-only: corrupt one group's gradient")

    p = sub.add_parser("ablate", help="run the four ablation configurations")
    _add_common(p)
    p.add_argument("--iters", type=int)

    p = sub.add_parser("bench", help="compare the kernel backends")
    p.add_argument("--gaussians", type=int, default=800)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args, parser)
    except TrainAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args, parser) -> int:
    if args.command == "gen":
        cfg = _config_from(args)
        generate_dataset(cfg, cfg.output_dir)
        print(f"dataset written to {cfg.output_dir}")
        return 0

    if args.command == "train":
        cfg = _config_from(args)
        report = train(cfg)
        print(f"final chamfer: {report.final_chamfer:.6g} "
              f"(report in {cfg.output_dir})")
        return 0

    if args.command == "eval":
        cfg = _config_from(args)
        cloud = load_cloud(args.checkpoint)
        value = evaluate_checkpoint(cloud, cfg, n_samples=args.samples)
        print(f"chamfer: {value:.6g}")
        return 0

    if args.command == "gradcheck":
        rows = run_gradcheck(seed=args.seed, corrupt_group=args.corrupt)
        print(format_rows(rows))
        return 0 if all(r.passed for r in rows) else 1

    if args.command == "ablate":
        cfg_base = _config_from(args)
        results = {}
        for mode, switches in ABLATION_MODES.items():
            overrides = list(args.set) + [f"{k}={v}" for k, v in switches.items()]
            if args.seed is not None:
                overrides.append(f"train.seed={args.seed}")
            if args.iters is not None:
                overrides.append(f"train.iterations={args.iters}")
            cfg = load_config(args.config, overrides)
            outdir = os.path.join(args.out or cfg_base.output_dir, mode)
            report = train(cfg, outdir=outdir)
            results[mode] = report.final_chamfer
            print(f"{mode}: chamfer {report.final_chamfer:.6g}")
        root = args.out or cfg_base.output_dir
        with open(os.path.join(root, "ablation.csv"), "w") as f:
            f.write("mode,chamfer\n")
            for mode, value in results.items():
                f.write(f"{mode},{value!r}\n")
        return 0

    if args.command == "bench":
        print(f"active backend: {backend_name()}")
        print(format_results(bench_backends(args.gaussians, args.size,
                                            args.repeats)))
        return 0

    parser.error(f"unknown command {args.command!r}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
