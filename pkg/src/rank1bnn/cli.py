"""Command-line entry point: ``rank1bnn <command> [flags]``.

Every command writes JSON lines (one record per line) to stdout or
``--log-file``; each record carries the seed it was produced with.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from rank1bnn import data as data_lib
from rank1bnn import diagnostics, theorem
from rank1bnn.checkpoint import Checkpoint, CheckpointError
from rank1bnn.metrics import MetricsReport, average_nll, corruption_aggregate, evaluate
from rank1bnn.trainer import (ConfigError, TrainConfig, TrainingDiverged, evaluate_model,
                              load_config, model_from_checkpoint, parse_config_text,
                              predict_log_probs, prepare_data, run_experiment)

SEED_ENV = "RANK1_SEED"


class _Output:
    def __init__(self, path: Optional[str]):
        self.fh = open(path, "w") if path else sys.stdout

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        if self.fh is not sys.stdout:
            self.fh.close()


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _resolve_seed(explicit: Optional[int], default: int = 0) -> int:
    if explicit is not None:
        return explicit
    env = _env_seed()
    return default if env is None else env


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-file", help="write JSON lines here instead of stdout")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rank1bnn", description="Rank-1 Bayesian neural networks")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config file plus overrides")
    train.add_argument("--config", help="flat key = value config file")
    train.add_argument("--checkpoint", help="write the final checkpoint to this path")
    train.add_argument("--checkpoint-dir", help="write periodic checkpoints into this directory")
    for name in TrainConfig.field_names():
        train.add_argument(f"--{name}", dest=f"cfg_{name}", default=None, metavar="VALUE")
    _add_common(train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--eval-samples", type=int, default=None,
                    help="samples per mixture component (default: from the checkpoint config)")
    ev.add_argument("--seed", type=int, default=None)
    _add_common(ev)

    ce = sub.add_parser("corrupt-eval", help="evaluate a checkpoint over the corruption grid")
    ce.add_argument("--checkpoint", required=True)
    ce.add_argument("--eval-samples", type=int, default=None)
    ce.add_argument("--types", default=",".join(data_lib.CORRUPTION_TYPES))
    ce.add_argument("--intensities", default=",".join(map(str, data_lib.INTENSITIES)))
    ce.add_argument("--seed", type=int, default=None)
    ce.add_argument("--workers", type=int, default=1)
    _add_common(ce)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--first-seed", type=int, default=None)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--rtol", type=float, default=1e-4)
    gc.add_argument("--check", action="append", default=[], help="restrict to named checks")
    _add_common(gc)

    kc = sub.add_parser("kl-check", help="closed-form KL vs Monte Carlo")
    kc.add_argument("--num-params", type=int, default=10)
    kc.add_argument("--samples", type=int, default=100_000)
    kc.add_argument("--seed", type=int, default=None)
    _add_common(kc)

    vt = sub.add_parser("verify-theorem", help="full-rank vs rank-1 perturbation variance identity")
    vt.add_argument("--width", type=int, default=3)
    vt.add_argument("--depth", type=int, default=2)
    vt.add_argument("--trials", type=int, default=10)
    vt.add_argument("--points", type=int, default=5)
    vt.add_argument("--c-sigma", type=float, default=2.0)
    vt.add_argument("--tol", type=float, default=1e-6)
    vt.add_argument("--seed", type=int, default=None)
    _add_common(vt)

    ip = sub.add_parser("induced-prior", help="sample induced weight marginals to CSV")
    ip.add_argument("--output", required=True, help="CSV destination")
    ip.add_argument("--draws", type=int, default=100_000)
    ip.add_argument("--families", default="gaussian,cauchy")
    ip.add_argument("--r-loc", type=float, default=0.0)
    ip.add_argument("--r-scale", type=float, default=1.0)
    ip.add_argument("--threshold", type=float, default=5.0)
    ip.add_argument("--seed", type=int, default=None)
    _add_common(ip)
    return parser


def _cmd_train(args, out: _Output) -> int:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if "seed" not in overrides:
        file_has_seed = False
        if args.config:
            try:
                with open(args.config) as fh:
                    file_has_seed = "seed" in parse_config_text(fh.read())
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        env = _env_seed()
        if not file_has_seed and env is not None:
            overrides["seed"] = env
    config = load_config(args.config, overrides)
    trainer, result, _ = run_experiment(
        config, log=lambda rep: out.write(rep.record(seed=config.seed)),
        checkpoint_dir=args.checkpoint_dir)
    if args.checkpoint:
        trainer.checkpoint().save(args.checkpoint)
    if config.train_epochs == 0:
        out.write(trainer.evaluate().record(seed=config.seed))
    return 0


def _load(path):
    ckpt = Checkpoint.load(path)
    model, config = model_from_checkpoint(ckpt)
    _, test_set = prepare_data(config)
    return model, config, test_set


def _cmd_eval(args, out: _Output) -> int:
    model, config, test_set = _load(args.checkpoint)
    seed = _resolve_seed(args.seed, config.seed)
    samples = args.eval_samples or config.eval_samples_per_component
    rng = np.random.default_rng(seed)
    lp = predict_log_probs(model, test_set.features, samples, rng, config.per_example_eval)
    report = evaluate(lp, test_set.labels, config.num_ece_bins)
    out.write(report.record(average_nll=average_nll(lp, test_set.labels),
                            eval_samples=samples, seed=seed))
    return 0


def _cmd_corrupt_eval(args, out: _Output) -> int:
    model, config, test_set = _load(args.checkpoint)
    seed = _resolve_seed(args.seed, config.seed)
    samples = args.eval_samples or config.eval_samples_per_component
    types = [t for t in args.types.split(",") if t]
    intensities = [int(i) for i in args.intensities.split(",") if i]
    report = corruption_report(model, test_set, types, intensities, samples, seed,
                               config.num_ece_bins, config.per_example_eval, args.workers)
    for rec in report.records(eval_samples=samples, seed=seed)[1:]:
        out.write(rec)
    c_nll, c_acc, c_ece = corruption_aggregate(report.corruption, types, intensities)
    out.write({"cNLL": c_nll, "cA": c_acc, "cECE": c_ece, "eval_samples": samples, "seed": seed})
    return 0


def corruption_report(model, dataset, types: Sequence[str], intensities: Sequence[int],
                      samples: int, seed: int, num_bins: int = 15, per_example: bool = True,
                      workers: int = 1) -> MetricsReport:
    """Evaluate every (type, intensity) cell; each cell owns an RNG derived from ``seed``."""
    cells = [data_lib.CorruptionSpec(t, i) for t in types for i in intensities]

    def run(index):
        spec = cells[index]
        rng = np.random.default_rng([seed, index])
        x = data_lib.corrupt(dataset.features, spec, rng)
        rep = evaluate_model(model, data_lib.Dataset(x, dataset.labels), samples, rng,
                             num_bins, per_example)
        return (spec.type, spec.intensity), (rep.nll, rep.accuracy, rep.ece)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(cells))))
    else:
        results = [run(i) for i in range(len(cells))]
    clean = evaluate_model(model, dataset, samples, np.random.default_rng([seed, len(cells)]),
                           num_bins, per_example)
    clean.corruption = dict(results)
    return clean


def _cmd_gradcheck(args, out: _Output) -> int:
    first = _resolve_seed(args.first_seed, 0)
    records = diagnostics.run_gradcheck(range(first, first + args.seeds), args.h, args.rtol, args.check)
    for rec in records:
        out.write(rec)
    failed = [r for r in records if not r["passed"]]
    out.write({"summary": "gradcheck", "checks": len(records), "failed": len(failed),
               "max_rel_error": max((r["max_rel_error"] for r in records), default=0.0),
               "seed": first})
    return 1 if failed or not records else 0


def _cmd_kl_check(args, out: _Output) -> int:
    seed = _resolve_seed(args.seed)
    records = diagnostics.run_kl_check(args.num_params, args.samples, seed)
    for rec in records:
        out.write({**rec, "seed": seed})
    failed = [r for r in records if not r["passed"]]
    out.write({"summary": "kl-check", "checks": len(records), "failed": len(failed), "seed": seed})
    return 1 if failed else 0


def _cmd_verify_theorem(args, out: _Output) -> int:
    seed = _resolve_seed(args.seed)
    report = theorem.verify(args.width, args.depth, args.trials, args.points, seed,
                            args.c_sigma, args.tol)
    out.write(report)
    return 0 if report["passed"] else 1


def _cmd_induced_prior(args, out: _Output) -> int:
    seed = _resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    families = [f for f in args.families.split(",") if f]
    samples = {}
    for family in families:
        samples[family] = diagnostics.induced_prior_samples(family, args.draws, rng,
                                                            args.r_loc, args.r_scale)
        out.write({"r_family": family, **diagnostics.tail_summary(samples[family], args.threshold),
                   "seed": seed})
    diagnostics.write_samples_csv(args.output, samples)
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "corrupt-eval": _cmd_corrupt_eval,
    "gradcheck": _cmd_gradcheck,
    "kl-check": _cmd_kl_check,
    "verify-theorem": _cmd_verify_theorem,
    "induced-prior": _cmd_induced_prior,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = None
    try:
        out = _Output(args.log_file)
        return COMMANDS[args.command](args, out)
    except (ConfigError, CheckpointError, TrainingDiverged, OSError, ValueError, KeyError) as exc:
        print(f"rank1bnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if out is not None:
            out.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
