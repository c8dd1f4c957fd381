"""Command-line entry point: ``mltp {train,gradcheck,taylor-scan,compare,synth}``.

Exit codes: 0 success, 1 verification failed, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as C
from . import data as D
from . import harness
from .errors import ConfigError, IngestionError, NumericError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _common(p):
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="run only this seed (overrides the config list)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="fixed-order reductions")
    p.add_argument("--precision", type=int, choices=(32, 64))


def build_parser():
    parser = argparse.ArgumentParser(prog="mltp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every configured seed")
    _common(p)

    p = sub.add_parser("gradcheck", help="verify variant gradients by finite differences")
    _common(p)
    p.add_argument("--cap", type=int, default=500, help="maximum parameter count")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--alpha", type=float, help="use this constant inner step size")

    p = sub.add_parser("taylor-scan", help="first-order expansion residual vs alpha scale")
    _common(p)
    p.add_argument("--scales", type=float, nargs="+", default=[1e-2, 5e-3, 2.5e-3])

    p = sub.add_parser("compare", help="mean ± std table over finished runs")
    p.add_argument("paths", nargs="+", help="run directories or parents of run directories")
    p.add_argument("--out", metavar="DIR", help="also write comparison.txt/.csv here")

    p = sub.add_parser("synth", help="write a synthetic dataset as train.csv/test.csv")
    p.add_argument("--kind", choices=("blobs", "spirals"), default="spirals")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--n-test-per-class", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR", required=True)
    return parser


def _load(args):
    cfg = C.load(args.config) if args.config else C.from_dict({})
    return C.apply_overrides(cfg, seed=args.seed, out=args.out,
                             deterministic=args.deterministic, precision=args.precision)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = _load(args)
            results = harness.run_train(cfg)
            for r in results:
                print(f"seed {r.seed}: {r.status}, final test accuracy {r.final_test_acc:.2f}%")
            if any(r.status != "ok" for r in results):
                return EXIT_NUMERIC
        elif args.command == "gradcheck":
            cfg = _load(args)
            report = harness.run_gradcheck(cfg, cap=args.cap, tol=args.tol, step=args.step,
                                           alpha_scale=args.alpha)
            return EXIT_OK if report["passed"] else EXIT_FAILED
        elif args.command == "taylor-scan":
            cfg = _load(args)
            report = harness.run_taylor_scan(cfg, tuple(args.scales))
            return EXIT_OK if report["passed"] else EXIT_FAILED
        elif args.command == "compare":
            harness.run_compare(args.paths, out=args.out)
        elif args.command == "synth":
            os.makedirs(args.out, exist_ok=True)
            train = D.make_synth(args.kind, args.n_per_class, args.classes, args.noise, args.seed)
            test = D.make_synth(args.kind, args.n_test_per_class, args.classes, args.noise,
                                args.seed + 7919, "test")
            D.write_csv(train, os.path.join(args.out, "train.csv"))
            D.write_csv(test, os.path.join(args.out, "test.csv"))
            print(f"wrote {len(train)} train / {len(test)} test rows to {args.out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
