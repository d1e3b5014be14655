"""Command-line entry points: run experiments, emit the theory report,
and sweep ablation variants."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .runner import ConfigError, config_from_dict, parse_config, run_experiment
from .theory import verify_theorems


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--benchmark",
                        choices=["permuted", "rotated", "binary_split"])
    parser.add_argument("--mode", help="noracl | static_ewc | ablation:<variant>")
    parser.add_argument("--seeds", help="comma-separated seed list")
    parser.add_argument("--data-dir", dest="data_dir",
                        help="directory with the four canonical MNIST files")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    for flag in ("benchmark", "mode", "seeds", "data_dir", "out_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _build_config(args: argparse.Namespace):
    overrides = _collect_overrides(args)
    if args.config:
        return parse_config(args.config, overrides)
    from .runner import _parse_value
    typed = {k: _parse_value(k, v) if isinstance(v, str) else v
             for k, v in overrides.items()}
    return config_from_dict(typed)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    aggregate = run_experiment(cfg)
    print(json.dumps({k: v for k, v in aggregate.items() if k != "per_seed"},
                     indent=2, sort_keys=True))
    return 1 if aggregate["n_failed"] else 0


def _cmd_theory(args: argparse.Namespace) -> int:
    report = verify_theorems(m0=args.m0, d=args.d, n_tasks=args.tasks,
                             seeds=range(args.seeds))
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"theory report: {'PASS' if report['passed'] else 'FAIL'} -> {path}")
    return 0 if report["passed"] else 1


def _cmd_ablate(args: argparse.Namespace) -> int:
    args.mode = f"ablation:{args.variant}"
    return _cmd_run(args)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="neurogrow",
        description="Continual learning with on-demand neuron growth")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a benchmark experiment")
    _add_run_flags(run_p)
    run_p.set_defaults(func=_cmd_run)

    theory_p = sub.add_parser("theory", help="verify the closed-form results")
    theory_p.add_argument("--report", required=True, help="output JSON path")
    theory_p.add_argument("--m0", type=int, default=8)
    theory_p.add_argument("--d", type=int, default=32)
    theory_p.add_argument("--tasks", type=int, default=50)
    theory_p.add_argument("--seeds", type=int, default=5)
    theory_p.set_defaults(func=_cmd_theory)

    ablate_p = sub.add_parser("ablate", help="run one growth-ablation variant")
    ablate_p.add_argument("--variant", required=True,
                          choices=["ed_only", "fsat_only", "fixed_per_task",
                                   "scheduled", "loss_plateau"])
    _add_run_flags(ablate_p)
    ablate_p.set_defaults(func=_cmd_ablate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
