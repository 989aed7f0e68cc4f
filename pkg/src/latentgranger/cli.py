"""Command line entry point: ``latentgranger <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, experiments as E, stats, training
from .exceptions import ConfigError, GrangerError, StorageError

log = logging.getLogger("latentgranger")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    p.add_argument("--seed", type=int, help="seed for data, training and error sampling")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", choices=E.DATASETS)
    p.add_argument("--granger", choices=("on", "off"))
    p.add_argument("--csv", help="input CSV for --dataset csv")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--workers", type=int, help="parallel processes for independent runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentgranger",
                                     description="Granger causality under latent confounding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset as CSV")
    _common(p)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--noise-std-y", type=float)
    p.add_argument("--gamma", type=float, help="set the Y noise to reach this SNR")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)

    p = sub.add_parser("granger-test", help="run the Granger test and write a report")
    _common(p)
    p.add_argument("--checkpoint", help="reuse a trained checkpoint instead of training")
    p.add_argument("--n", type=int, help="number of prediction-error samples")

    p = sub.add_parser("sweep-snr", help="bisection for the critical signal-to-noise ratio")
    _common(p)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--k-seeds", type=int)

    p = sub.add_parser("sweep-seqlen", help="sensitivity to the training sequence length")
    _common(p)
    p.add_argument("--taus", type=int, nargs="+")

    p = sub.add_parser("baseline-var", help="linear VAR Granger F-test")
    _common(p)
    p.add_argument("--lag", type=int, default=5)
    p.add_argument("--alpha", type=float, default=stats.ALPHA)
    return parser


def config_from_args(args) -> E.ExperimentConfig:
    cfg = E.ExperimentConfig.load(args.config) if args.config else E.ExperimentConfig()
    updates = {}
    if args.dataset:
        updates["dataset"] = args.dataset
    if args.granger:
        updates["granger"] = args.granger == "on"
    if args.csv:
        updates["csv_path"] = args.csv
        updates.setdefault("dataset", "csv")
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out:
        updates["out_dir"] = args.out
    if args.workers is not None:
        updates["workers"] = args.workers
    train_updates = {}
    if args.max_epochs is not None:
        train_updates["max_epochs"] = args.max_epochs
        if cfg.train.patience >= args.max_epochs > 0:
            train_updates["patience"] = max(1, args.max_epochs - 1)
    if args.seq_len is not None:
        train_updates["seq_len"] = args.seq_len
    if train_updates:
        updates["train"] = replace(cfg.train, **train_updates)
    if getattr(args, "gamma", None) is not None:
        updates["gamma"] = args.gamma
    if getattr(args, "noise_std_y", None) is not None:
        updates["noise_std_y"] = args.noise_std_y
    if getattr(args, "T", None) is not None:
        updates["T"] = args.T
    return E.ExperimentConfig.from_dict({**cfg.to_dict(), **_plain(updates)})


def _plain(d: dict) -> dict:
    out = dict(d)
    if "train" in out and isinstance(out["train"], training.TrainConfig):
        out["train"] = out["train"].to_dict()
    return out


def _out_dir(cfg) -> Path:
    if not cfg.out_dir:
        raise ConfigError("--out is required")
    path = Path(cfg.out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {path}: {exc}") from exc
    return path


def cmd_gen(args, cfg):
    if cfg.dataset == "csv":
        raise ConfigError("gen needs --dataset synth1 or synth2")
    seed = cfg.seeds[0]
    bundle = datagen.generate(E.gen_config(cfg, seed))
    path = _out_dir(cfg) / f"{cfg.name}_seed{seed}.csv"
    datagen.write_csv_bundle(bundle, path)
    print(path)


def _prepared(cfg, seed):
    bundle = E.load_bundle(cfg, seed)
    if cfg.standardize:
        bundle, _ = datagen.standardize(bundle, "train", cfg.train.fractions)
    return bundle


def cmd_train(args, cfg):
    seed = cfg.seeds[0]
    tcfg = replace(cfg.train, seed=seed)
    bundle = _prepared(cfg, seed)
    result = training.train(bundle, tcfg)
    out = _out_dir(cfg)
    ckpt = training.Checkpoint.from_result(result, tcfg, {"id": f"{cfg.name}-seed{seed}",
                                                         "dataset": cfg.name})
    path = out / f"{cfg.name}_seed{seed}.lgck"
    training.save_checkpoint(ckpt, path)
    print(path)


def cmd_granger_test(args, cfg):
    if args.n is not None:
        cfg = replace(cfg, n_samples=args.n)
    seed = cfg.seeds[0]
    if args.checkpoint:
        ckpt = training.load_checkpoint(args.checkpoint)
        bundle = _prepared(cfg, seed)
        ws = datagen.window_split(bundle, ckpt.config.seq_len, ckpt.config.fractions)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        errors = stats.sample_prediction_errors(
            ckpt.params, ws.test, cfg.n_samples, rng, ckpt.config.deterministic_latent,
            ckpt.config.yres_from_mean,
            {"dataset": cfg.name, "seed": seed, "checkpoint_id": ckpt.meta.get("id")})
        report = stats.decide_granger(errors, cfg.alpha)
        if cfg.out_dir:
            out = _out_dir(cfg)
            E._write_atomic(out / "report.json", report.to_text())
            E._write_atomic(out / "errors.csv", E.errors_csv(errors))
    else:
        report = E.run_verdict(cfg, seed)
    sys.stdout.write(report.to_text())


def cmd_sweep_snr(args, cfg):
    res = E.snr_bisection(cfg, args.lo, args.hi, args.tol, args.k_seeds)
    out = _out_dir(cfg)
    E.emit_results(res.records, out, "csv", "snr_sweep")
    E.emit_results(res.records, out, "text", "snr_sweep")
    summary = {"gamma_star": res.gamma_star, "lo": res.lo, "hi": res.hi}
    E._write_atomic(out / "snr_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_sweep_seqlen(args, cfg):
    records = E.seqlen_sweep(cfg, args.taus)
    out = _out_dir(cfg)
    E.emit_results(records, out, "csv", "seqlen_sweep")
    path = E.emit_results(records, out, "text", "seqlen_sweep")
    print(path)


def cmd_baseline_var(args, cfg):
    bundle = E.load_bundle(cfg, cfg.seeds[0])
    fit = stats.var_granger_baseline(bundle.x, bundle.y, args.lag, args.alpha)
    text = json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n"
    if cfg.out_dir:
        E._write_atomic(_out_dir(cfg) / "baseline_var.json", text)
    sys.stdout.write(text)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "granger-test": cmd_granger_test,
    "sweep-snr": cmd_sweep_snr,
    "sweep-seqlen": cmd_sweep_seqlen,
    "baseline-var": cmd_baseline_var,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](args, cfg)
    except GrangerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
