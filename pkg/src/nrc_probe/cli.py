"""Command line interface.

Subcommands: gen-data, train, measure, sweep-wd, report.
Exit codes: 0 success, 1 config error, 2 runtime failure.

Thread control: --threads caps the BLAS pool; the NRC_PROBE_THREADS
environment variable overrides the flag. Either must take effect before
numpy is imported, so the heavy modules are imported inside the command
handlers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

_BLAS_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads(flag_value: int | None) -> None:
    env = os.environ.get("NRC_PROBE_THREADS")
    value = env if env else (str(flag_value) if flag_value else None)
    if value is None:
        return
    if "numpy" in sys.modules:
        logging.getLogger(__name__).warning(
            "numpy already imported; thread setting %s may not apply", value)
    for var in _BLAS_ENV_VARS:
        os.environ.setdefault(var, value)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrc-probe",
        description="Train small MLP regressors and measure layer-wise "
                    "neural regression collapse.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override dataset and schedule seeds")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (NRC_PROBE_THREADS env wins)")
    parser.add_argument("--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    p.add_argument("spec", help="generator spec JSON file")
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("-c", "--config", required=True)

    p = sub.add_parser("measure", help="recompute metrics for a checkpoint")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--out", default=None, help="report path")

    p = sub.add_parser("sweep-wd", help="weight decay sweep")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--lambdas", required=True,
                   help="comma-separated weight decay values")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")

    p = sub.add_parser("report", help="emit plot-ready files for a run")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("csv", "json", "all"), default="all")
    return parser


def _cmd_gen_data(args) -> int:
    from .data import GeneratorSpec, generate, save_dataset

    doc = json.loads(Path(args.spec).read_text())
    spec = GeneratorSpec(**doc)
    ds = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = save_dataset(ds, out / spec.name)
    print(f"wrote {bin_path} and {json_path} (N={ds.n}, d={ds.d}, t={ds.t})")
    return 0


def _cmd_train(args) -> int:
    from .runner import load_config, run_experiment

    config = load_config(args.config, seed_override=args.seed)
    run_dir = run_experiment(config)
    print(f"run complete: {run_dir}")
    return 0


def _cmd_measure(args) -> int:
    from .runner import load_config, measure_checkpoint

    config = load_config(args.config, seed_override=args.seed)
    doc = measure_checkpoint(config, args.checkpoint, out_path=args.out)
    print(f"measured checkpoint at epoch {doc['epoch']}: "
          f"first_collapsed={doc['first_collapsed_layer']}")
    return 0


def _cmd_sweep(args) -> int:
    from .runner import load_config, sweep_weight_decay

    config = load_config(args.config, seed_override=args.seed)
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    sweep_dir = sweep_weight_decay(config, lambdas, jobs=args.jobs)
    print(f"sweep complete: {sweep_dir}")
    return 0


def _cmd_report(args) -> int:
    from .runner import emit_report

    written = emit_report(args.run_dir, args.format)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "measure": _cmd_measure,
    "sweep-wd": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _apply_threads(args.threads)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")

    from .runner import ConfigError

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
