"""Command-line harness: train, ablate, verify, gen-data.

Exit code 0 means every requested run completed (and, for verify, every
property family passed); config/usage problems exit 2, runtime failures 1.
"""

from __future__ import annotations

import argparse
import sys

from dualdyn.config import ConfigError, parse_config
from dualdyn.data import gen_damped_oscillator, gen_spirals, save_csv
from dualdyn.experiment import ablation_summary, run_ablation_suite, run_experiment
from dualdyn.model import MODES
from dualdyn.verification import run_verification_suite


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dualdyn",
        description="implicit latent dynamics with an invertible flow decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", required=True, help="JSON config file")
    train.add_argument("--seed", type=int, default=None, help="override config seed")
    train.add_argument("--out", default="dualdyn-run",
                       help="directory for report.json/checkpoint.npz/metrics.csv")

    ablate = sub.add_parser("ablate", help="run the mode ablation suite")
    ablate.add_argument("--config", required=True, help="JSON config file")
    ablate.add_argument("--modes", required=True,
                        help=f"comma-separated subset of {','.join(MODES)}")
    ablate.add_argument("--seed", type=int, default=None, help="override config seed")
    ablate.add_argument("--out", default="dualdyn-ablation",
                        help="directory receiving one subdirectory per mode")

    sub.add_parser("verify", help="run the release-gate property suites")

    gen = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    gen.add_argument("--kind", required=True, choices=("spirals", "oscillator"))
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.add_argument("--n", type=int, default=None, help="series count")
    gen.add_argument("--length", type=int, default=50, help="observed points per series")
    gen.add_argument("--noise-std", type=float, default=0.05,
                     help="spirals observation noise")
    gen.add_argument("--horizon", type=int, default=10, help="oscillator target points")
    gen.add_argument("--seed", type=int, default=0)
    return parser


def _metric_line(report):
    metrics = report["test_metrics"]
    if not metrics:
        return "no test metrics (run not evaluable)"
    return "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in sorted(metrics.items()))


def _cmd_train(args):
    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    report = run_experiment(config, out_dir=args.out)
    print(f"status={report['status']} epochs={report['epochs_run']} "
          f"best_epoch={report['best_epoch']}")
    print("test: " + _metric_line(report))
    print(f"outputs in {args.out}")
    return 0 if report["status"] == "ok" else 1


def _cmd_ablate(args):
    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    reports = run_ablation_suite(config, modes, out_dir=args.out)
    print(f"{'mode':<16} {'status':<9} test metric")
    for row in ablation_summary(reports):
        shown = "-" if row["value"] is None else f"{row['value']:.4f}"
        print(f"{row['mode']:<16} {row['status']:<9} {row['metric']}={shown}")
    print(f"outputs in {args.out}")
    return 0 if all(r["status"] == "ok" for r in reports) else 1


def _cmd_verify():
    report = run_verification_suite()
    for row in report:
        verdict = "PASS" if row["passed"] else "FAIL"
        print(f"[{verdict}] {row['name']}: {row['detail']}")
    failed = [row["name"] for row in report if not row["passed"]]
    if failed:
        print(f"{len(failed)} of {len(report)} property families failed: "
              + ", ".join(failed))
        return 1
    print(f"all {len(report)} property families passed")
    return 0


def _cmd_gen_data(args):
    if args.kind == "spirals":
        n = 400 if args.n is None else args.n
        batch = gen_spirals(n, args.length, args.noise_std, seed=args.seed)
    else:
        n = 200 if args.n is None else args.n
        batch = gen_damped_oscillator(n, length=args.length, horizon=args.horizon,
                                      seed=args.seed)
    save_csv(batch, args.out)
    print(f"wrote {batch.series_count} series to {args.out}")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        if args.command == "verify":
            return _cmd_verify()
        return _cmd_gen_data(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
