"""Command-line front end.

Exit codes: 0 success, 2 config or argument error, 3 training failure,
4 shape mismatch, 5 majority of evaluation trials failed.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, io
from .exceptions import ConditioningError, ShapeMismatchError, SpgpError, TrainingError
from .pooling import VARIANTS, sparsity_report
from .trainer import TrainConfig, fit, fit_restricted

CONFIG_VERSION = 1
EXIT_CONFIG, EXIT_TRAIN, EXIT_SHAPE, EXIT_TRIALS = 2, 3, 4, 5

log = logging.getLogger("spgp")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _csv_list(text, cast=str):
    if isinstance(text, (list, tuple)):
        return [cast(t) for t in text]
    return [cast(t) for t in str(text).split(",") if t.strip()]


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=io.json_default)
        fh.write("\n")


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args):
    if args.threads is not None:
        return max(1, int(args.threads))
    env = os.environ.get("SPGP_THREADS")
    return max(1, int(env)) if env else 1


def _effective(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _train_config(args, variant=None, seed=None):
    return TrainConfig(
        variant=variant or args.variant,
        prior_scale=args.prior_sigma,
        kernel=args.kernel,
        max_iters=args.max_iters,
        restarts=args.restarts,
        step_rule=args.step_rule,
        learning_rate=args.lr,
        tolerance=args.tol,
        seed=args.seed if seed is None else seed,
        threads=_threads(args),
    )


def _load_data(args):
    tensor = io.read_tensor(args.tensor)
    targets = io.read_targets(args.targets)
    if len(targets) != tensor.n_sequences:
        raise ShapeMismatchError(
            f"{len(targets)} targets for {tensor.n_sequences} sequences in the tensor"
        )
    return tensor, targets


def _test_indices(args, n):
    if getattr(args, "metadata", None):
        with open(args.metadata, encoding="utf-8") as fh:
            return np.asarray(json.load(fh)["test_indices"], dtype=np.int64)
    size = args.test_size if args.test_size is not None else int(round(0.2 * n))
    return bench.holdout_indices(n, size, args.test_seed)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    spec = bench.SyntheticSpec.planted(
        args.n, args.p, args.m, args.k, seed=args.seed,
        function_seed=args.seed if args.function_seed is None else args.function_seed,
        noise_sd=args.noise, noise_frac=args.noise_frac,
        max_mutations=min(args.max_mutations, args.p),
        single_fraction=args.single_fraction, target=args.target,
    )
    data = bench.generate(spec, seed=args.seed)
    out = _outdir(args.out)
    io.write_tensor(data.tensor, out / "embeddings.spgp")
    io.write_targets(data.targets, out / "targets.csv")
    meta = data.metadata()
    size = args.test_size if args.test_size is not None else int(round(0.2 * args.n))
    meta["test_indices"] = bench.holdout_indices(args.n, size, args.seed).tolist()
    meta["effective_config"] = _effective(args)
    _dump_json(meta, out / "metadata.json")
    log.info("wrote %s", out)
    return 0


def cmd_split(args):
    targets = io.read_targets(args.targets)
    test = _test_indices(args, len(targets))
    split = bench.make_split(targets, args.kind, args.seed, args.val_size, test)
    io.write_split(split, args.out)
    return 0


def cmd_train(args):
    tensor, targets = _load_data(args)
    idx = np.arange(tensor.n_sequences)
    if args.split:
        split = io.read_split(args.split)
        split.check_range(tensor.n_sequences)
        idx = split.train
    config = _train_config(args)
    values, y, counts = tensor.values[idx], targets.values[idx], targets.mutation_count[idx]
    if args.restricted_1mut:
        model = fit_restricted(values, y, counts, config)
    else:
        model = fit(values, y, config)
    out = _outdir(args.out)
    snapshot = io.model_to_bytes(model)
    (out / "model.spgm").write_bytes(snapshot)
    io.write_trace(model, out / "trace.csv")
    report = sparsity_report(model.head, model.n_positions)
    hp = model.hypers
    summary = {
        "final_objective": model.objective,
        "n_train": model.n_train,
        "restricted": model.restricted,
        "variant": model.head.variant,
        "prior_sigma": model.head.prior_scale if model.head.variant == "prior" else None,
        "kernel": model.kernel,
        "hypers": {
            "log_sigma_f2": hp.log_sigma_f2, "log_sigma_l": hp.log_sigma_l,
            "log_sigma_eps2": hp.log_sigma_eps2, "signal_variance": hp.signal_variance,
            "length_scale": hp.length_scale, "noise_variance": hp.noise_variance,
        },
        "jitter_used": model.jitter_used,
        "targets_standardized": True,
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "sparsity": {"zero_count": report["zero_count"], "threshold": report["threshold"]},
        "snapshot_sha256": hashlib.sha256(snapshot).hexdigest(),
        "effective_config": _effective(args),
    }
    _dump_json(summary, out / "summary.json")
    return 0


def cmd_predict(args):
    model = io.load_model(args.model)
    tensor = io.read_tensor(args.tensor)
    targets = io.read_targets(args.targets) if args.targets else None
    if targets is not None and len(targets) != tensor.n_sequences:
        raise ShapeMismatchError("targets and tensor disagree in sequence count")
    idx = np.arange(tensor.n_sequences)
    if args.split:
        split = io.read_split(args.split)
        split.check_range(tensor.n_sequences)
        idx = getattr(split, args.subset)
    dist = model.predict(tensor.values[idx])
    ids = [targets.ids[i] for i in idx] if targets is not None else [str(i) for i in idx]
    y_true = targets.values[idx] if targets is not None else None
    io.write_predictions(args.out, ids, dist, y_true)
    return 0


def _write_trial_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "trial", "split_seed", "mae"])
        for method, trial, seed, value in report.rows:
            writer.writerow([method, trial, seed, repr(float(value))])


def cmd_eval(args):
    tensor, targets = _load_data(args)
    methods = _csv_list(args.methods)
    unknown = set(methods) - set(VARIANTS)
    if unknown:
        raise CliError(f"unknown methods {sorted(unknown)}")
    test = _test_indices(args, tensor.n_sequences)
    report = bench.run_trials(
        (tensor, targets), args.split_kind, methods, args.trials, args.seed, test,
        _train_config(args), args.val_size, threads=_threads(args),
    )
    out = _outdir(args.out)
    _write_trial_csv(report, out / "trials.csv")
    summary = report.to_json()
    summary["effective_config"] = _effective(args)
    _dump_json(summary, out / "summary.json")
    if report.success_fraction < 0.5:
        log.error("only %d of %d trials succeeded", report.effective_trials, args.trials)
        return EXIT_TRIALS
    return 0


def cmd_sweep(args):
    tensor, targets = _load_data(args)
    test = _test_indices(args, tensor.n_sequences)
    rows, best = bench.sweep_prior(
        (tensor, targets), args.split_kind, _csv_list(args.sigmas, float), args.trials,
        args.seed, test, _train_config(args, variant="prior"), args.val_size,
        threads=_threads(args),
    )
    out = _outdir(args.out)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sigma", "mean_mae", "std_mae", "n"])
        for r in rows:
            writer.writerow([repr(r["sigma"]), repr(r["mean"]), repr(r["std"]), r["n"]])
    _dump_json({"rows": rows, "best_sigma": best, "effective_config": _effective(args)},
               out / "sweep.json")
    if all(r["n"] < 0.5 * args.trials for r in rows):
        return EXIT_TRIALS
    return 0


def cmd_mask_report(args):
    model = io.load_model(args.model)
    report = sparsity_report(model.head, model.n_positions, args.threshold)
    payload = {"variant": model.head.variant, **report}
    text = json.dumps(payload, indent=2, default=io.json_default)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


# -- parser ------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="mean")
    p.add_argument("--kernel", choices=("matern32", "matern52"), default="matern32")
    p.add_argument("--prior-sigma", type=float, default=0.15)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--step-rule", choices=("adaptive", "fixed"), default="adaptive")
    p.add_argument("--seed", type=int, default=0)


def _add_test_flags(p):
    p.add_argument("--metadata", help="synth metadata.json providing test_indices")
    p.add_argument("--test-size", type=int, default=None, help="default: 20%% of samples")
    p.add_argument("--test-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="spgp", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config; explicit flags override its values")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-mask synthetic dataset")
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--p", type=int, default=50)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--function-seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--noise-frac", type=float, default=0.1)
    p.add_argument("--max-mutations", type=int, default=5)
    p.add_argument("--single-fraction", type=float, default=None)
    p.add_argument("--target", choices=("cosine", "additive"), default="cosine")
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--out", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a train/validation/test split")
    p.add_argument("--targets", required=True)
    p.add_argument("--kind", choices=("one-mut-shuffle", "uniform-shuffle", "holdout"),
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-size", type=int, default=None)
    _add_test_flags(p)
    p.add_argument("--out", default="split.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit a model and write a snapshot")
    p.add_argument("--tensor", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--split")
    p.add_argument("--restricted-1mut", action="store_true")
    _add_train_flags(p)
    p.add_argument("--out", default="model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictive mean and variance per sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--targets")
    p.add_argument("--split")
    p.add_argument("--subset", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(func=cmd_predict)

    for name, func, helptext in (("eval", cmd_eval, "multi-trial MAE against the baseline"),
                                 ("sweep", cmd_sweep, "sweep the Half-Cauchy prior scale")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--tensor", required=True)
        p.add_argument("--targets", required=True)
        p.add_argument("--split-kind", default="one-mut-shuffle",
                       choices=("one-mut-shuffle", "uniform-shuffle", "holdout"))
        p.add_argument("--trials", type=int, default=64)
        p.add_argument("--val-size", type=int, default=None)
        _add_test_flags(p)
        _add_train_flags(p)
        if name == "eval":
            p.add_argument("--methods", default="mean,softmax,sigmoid,prior")
        else:
            p.add_argument("--sigmas", default="0.05,0.15,0.5")
        p.add_argument("--out", default=name)
        p.set_defaults(func=func)

    p = sub.add_parser("mask-report", help="count near-zero mask weights")
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_report)
    return parser, sub


def _apply_config(parser, sub, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, encoding="utf-8") as fh:
        config = json.load(fh)
    if config.get("config_version") != CONFIG_VERSION:
        raise CliError(f"config_version must be {CONFIG_VERSION}")
    values = {k.replace("-", "_"): v for k, v in config.items()
              if k not in ("config_version", "subcommand")}
    for name in ("threads", "verbose"):
        if name in values:
            parser.set_defaults(**{name: values.pop(name)})
    for choice in sub.choices.values():
        dests = {a.dest for a in choice._actions}
        choice.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub = build_parser()
    try:
        _apply_config(parser, sub, argv)
    except (OSError, ValueError, CliError) as exc:
        print(f"spgp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"spgp: error: {exc}", file=sys.stderr)
        return exc.code
    except ShapeMismatchError as exc:
        print(f"spgp: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (TrainingError, ConditioningError) as exc:
        print(f"spgp: training failed: {exc}", file=sys.stderr)
        for line in getattr(exc, "diagnostics", []):
            print(f"  {line}", file=sys.stderr)
        return EXIT_TRAIN
    except (SpgpError, OSError, ValueError, KeyError) as exc:
        print(f"spgp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
