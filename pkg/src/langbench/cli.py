"""Command-line entry point.

Verbs: run, diagnose, attack, ood, plots. Exit codes: 0 on success, 1 for
configuration problems (bad keys, missing files), 2 for runtime aborts.
"""

import argparse
import sys

from .config import ConfigError, load_config
from .harness import (RuntimeAbort, run_attack, run_diagnose, run_experiment,
                      run_ood, run_plots)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="langbench",
        description="Train and compare Langevin-dynamics samplers.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("config", help="path to a key=value config file")
    p.add_argument("--out", help="override out_dir from the config")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's checkpoint if present")

    p = sub.add_parser("diagnose", help="recompute the ESS report for a run")
    p.add_argument("run_dir")

    p = sub.add_parser("attack", help="FGSM adversarial evaluation of a run")
    p.add_argument("run_dir")
    p.add_argument("--eps", type=float, default=0.25, help="perturbation size on [0,1] pixels")

    p = sub.add_parser("ood", help="max-probability histogram on an OOD dataset")
    p.add_argument("run_dir")
    p.add_argument("images", nargs="?", default=None,
                   help="IDX image file (defaults to the run's configured OOD set)")
    p.add_argument("--labels", default=None, help="optional IDX label file")

    p = sub.add_parser("plots", help="emit tidy per-figure CSVs for a run or suite")
    p.add_argument("path", help="one run directory, or a directory of run directories")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            cfg, defaulted = load_config(args.config)
            if args.out:
                cfg.out_dir = args.out
            out = run_experiment(cfg, resume=args.resume)
            print(f"run complete: {out}")
            if defaulted:
                print(f"defaults applied: {', '.join(defaulted)}")
        elif args.verb == "diagnose":
            report = run_diagnose(args.run_dir)
            if report is None:
                print("chain too short for an ESS report")
            else:
                print(f"mESS {report.mess:.3f} over n={report.n} records "
                      f"({report.p} coordinates)")
        elif args.verb == "attack":
            clean, adv = run_attack(args.run_dir, args.eps)
            print(f"clean accuracy {clean:.4f}, adversarial accuracy {adv:.4f} "
                  f"at eps={args.eps}")
        elif args.verb == "ood":
            report = run_ood(args.run_dir, images_path=args.images, labels_path=args.labels)
            print(f"ood mean max-prob {report.mean:.4f}, median {report.median:.4f}")
        elif args.verb == "plots":
            plots = run_plots(args.path)
            print(f"plot data written to {plots}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RuntimeAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
