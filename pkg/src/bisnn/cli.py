"""Command line entry point: ``bisnn <subcommand> ...``.

Failures exit nonzero and print a JSON object ``{"error": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import PopulationCodeSpec
from .experiment import (
    TWO_MOONS_BOX, ConfigError, TrainingDiverged, TrainRunConfig, make_synthetic, run_eval,
    run_sweep, run_train,
)

# CLI flag -> config key, for flags that override config-file values
OVERRIDES = {
    "rule": "rule", "dataset": "dataset", "epochs": "epochs", "batch_size": "batch_size",
    "eta": "eta", "rho": "rho", "tau_gs": "tau_gs", "hidden": "hidden", "out": "out_dir",
    "test_dataset": "test_dataset", "dvs_dir": "dvs_dir", "eval_every": "eval_every",
    "weight_seed": "weight_seed", "data_seed": "data_seed", "gumbel_seed": "gumbel_seed",
    "ensemble_size": "ensemble_size", "T": "T",
}


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _add_run_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--rule", choices=["st", "bayes", "fp"])
    p.add_argument("--dataset", help="twomoons | onedim | dvs | path to a .bsd file")
    p.add_argument("--test-dataset")
    p.add_argument("--dvs-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--tau-gs", type=float)
    p.add_argument("--hidden", type=_int_list, help="comma-separated hidden layer widths")
    p.add_argument("--T", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--weight-seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--gumbel-seed", type=int)
    p.add_argument("--out", help="output directory")


def _config(args) -> TrainRunConfig:
    overrides = {key: getattr(args, flag) for flag, key in OVERRIDES.items() if hasattr(args, flag)}
    return TrainRunConfig.from_file(args.config, **overrides)


def cmd_gen_data(args):
    if args.dataset == "onedim":
        spec = PopulationCodeSpec(n_units=args.n_units or 20, input_range=(-1.2, 1.2), T=args.T)
    else:
        spec = PopulationCodeSpec(n_units=args.n_units or 10, input_range=TWO_MOONS_BOX[:2], T=args.T)
    ds = make_synthetic(args.dataset, spec, args.seed, args.n_per_class, args.noise)
    ds.save(args.out)
    print(json.dumps({"out": args.out, "n": ds.n_examples, "T": ds.T, "n_inputs": ds.n_inputs}))


def cmd_ingest_dvs(args):
    from .events import BinningSpec, ingest_directory
    from .experiment import split_dataset

    spec = BinningSpec(window_us=args.window_us, T=args.T, crop=tuple(args.crop),
                       downsample=args.downsample, polarity_channels=not args.no_polarity)
    ds = ingest_directory(args.root, spec, args.digits, args.scale, args.limit)
    result = {"n": ds.n_examples, "n_inputs": ds.n_inputs}
    if args.test_out:
        train, test = split_dataset(ds, args.test_fraction, args.seed)
        train.save(args.out)
        test.save(args.test_out)
        result.update(n_train=train.n_examples, n_test=test.n_examples)
    else:
        ds.save(args.out)
    print(json.dumps(result))


def cmd_train(args):
    print(json.dumps(run_train(_config(args)), indent=2))


def cmd_sweep(args):
    cfg = _config(args)
    summary = run_sweep(cfg, args.rhos, include_st=args.with_st, jobs=args.jobs)
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    out = run_eval(args.checkpoint, args.data, args.predictor, args.K, args.seed, args.bins, args.last_step)
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_gradcheck(args):
    from .gradcheck import estimator_check, frozen_trajectory_suite, random_multilinear

    errs = frozen_trajectory_suite(args.cases, args.seed)
    rng = np.random.default_rng(args.seed)
    worst_z = 0.0
    for _ in range(args.estimator_cases):
        n = int(rng.integers(1, 5))
        mean, se, exact = estimator_check(random_multilinear(rng, n), rng.normal(0, 0.7, n),
                                          args.tau, args.samples, int(rng.integers(2**31)))
        worst_z = max(worst_z, float(np.max(np.abs(mean - exact) / se)))
    report = {
        "frozen_trajectory_max_rel_error": max(errs),
        "frozen_trajectory_tolerance": args.rtol,
        "estimator_max_standard_errors": worst_z,
        "estimator_tolerance": 3.0,
    }
    print(json.dumps(report, indent=2))
    if max(errs) > args.rtol or worst_z > 3.0:
        raise GradcheckFailed(report)


class GradcheckFailed(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and encode a synthetic dataset")
    p.add_argument("--dataset", choices=["twomoons", "onedim"], default="twomoons")
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--n-units", type=int)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest-dvs", help="bin MNIST-DVS AEDAT recordings into a dataset file")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--digits", type=_int_list, default=[0, 1])
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--limit", type=int)
    p.add_argument("--window-us", type=int, default=2000)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--crop", type=int, nargs=4, default=[32, 32, 64, 64], metavar=("X0", "Y0", "W", "H"))
    p.add_argument("--downsample", type=int, default=2)
    p.add_argument("--no-polarity", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest_dvs)

    p = sub.add_parser("train", help="train one model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="Bayes runs over several temperatures")
    _add_run_flags(p)
    p.add_argument("--rhos", type=_float_list, default=[1e-6, 1e-4, 1e-2, 1.0])
    p.add_argument("--with-st", action="store_true", help="also train the straight-through rule")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", choices=["map", "ensemble", "all"], default="all")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--last-step", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference and estimator self-checks")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--estimator-cases", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # reported as JSON for callers
        code = 2 if isinstance(exc, (ConfigError, FileNotFoundError)) else 1
        if isinstance(exc, TrainingDiverged):
            message = str(exc.args[0])
        else:
            message = str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
