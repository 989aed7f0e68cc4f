"""End-to-end runs: single verdicts, SNR bisection and sequence-length sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen, stats, training
from .exceptions import (BracketError, ConfigError, GrangerError, MixedSweepError, StageError,
                         StorageError)

log = logging.getLogger(__name__)

DATASETS = ("synth1", "synth2", "csv")
SEQLEN_GRID = (4, 6, 8, 10, 12, 14, 16)


@dataclass
class ExperimentConfig:
    dataset: str = "synth1"
    granger: bool = True
    T: int = 1000
    noise_std_y: float | None = None
    gamma: float | None = None
    csv_path: str | None = None
    column_map: dict | None = None
    standardize: bool = True
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    n_samples: int = stats.N_SAMPLES
    alpha: float = stats.ALPHA
    gamma_lo: float = 10.0
    gamma_hi: float = 100.0
    gamma_tol: float = 2.0
    k_seeds: int = 3
    taus: tuple = SEQLEN_GRID
    seeds: tuple = (0,)
    out_dir: str | None = None
    experiment_id: str | None = None
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = training.TrainConfig.from_dict(self.train)
        self.taus = tuple(int(t) for t in self.taus)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.gamma_lo < self.gamma_hi:
            raise ConfigError("gamma bracket needs lo < hi")
        if self.k_seeds < 1:
            raise ConfigError("k_seeds must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def name(self) -> str:
        if self.experiment_id:
            return self.experiment_id
        if self.dataset == "csv":
            return Path(self.csv_path or "csv").stem
        return f"{self.dataset}_{'granger' if self.granger else 'nogranger'}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["taus"] = list(self.taus)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def gen_config(cfg: ExperimentConfig, seed: int) -> datagen.GenConfig:
    dataset_id = 1 if cfg.dataset == "synth1" else 2
    gc = datagen.GenConfig(dataset_id=dataset_id, granger=cfg.granger, T=cfg.T,
                           noise_std_y=cfg.noise_std_y, seed=seed)
    if cfg.gamma is not None:
        gc.noise_std_y = datagen.sigma_for_target_snr(gc, cfg.gamma)
    return gc


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except GrangerError as exc:
        raise StageError(name, exc) from exc


def load_bundle(cfg: ExperimentConfig, seed: int) -> datagen.SeriesBundle:
    if cfg.dataset == "csv":
        if not cfg.csv_path:
            raise ConfigError("dataset 'csv' needs csv_path")
        return datagen.load_csv_bundle(cfg.csv_path, cfg.column_map)
    return datagen.generate(gen_config(cfg, seed))


def _check(cfg: ExperimentConfig):
    if cfg.dataset == "csv":
        if not cfg.csv_path:
            raise ConfigError("dataset 'csv' needs csv_path")
        if not Path(cfg.csv_path).is_file():
            raise ConfigError(f"CSV file not found: {cfg.csv_path}")


@dataclass
class RunOutcome:
    report: stats.GrangerReport
    errors: stats.ErrorSamples
    checkpoint: training.Checkpoint
    bundle: datagen.SeriesBundle


def run_pipeline(cfg: ExperimentConfig, seed: int) -> RunOutcome:
    """generate/load -> standardize -> split -> train -> sample errors -> decide."""
    _check(cfg)
    bundle = _stage("data", load_bundle, cfg, seed)
    if cfg.standardize:
        bundle, _ = _stage("standardize", datagen.standardize, bundle, "train",
                           cfg.train.fractions)
    tcfg = replace(cfg.train, seed=seed)
    ws = _stage("split", datagen.window_split, bundle, tcfg.seq_len, tcfg.fractions)
    result = _stage("train", training.train, bundle, tcfg, ws)
    ckpt_id = f"{cfg.name}-seed{seed}"
    provenance = {"dataset": cfg.name, "seed": seed, "checkpoint_id": ckpt_id}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    errors = _stage("errors", stats.sample_prediction_errors, result.params, ws.test,
                    cfg.n_samples, rng, tcfg.deterministic_latent, tcfg.yres_from_mean,
                    provenance)
    report = _stage("decide", stats.decide_granger, errors, cfg.alpha)
    ckpt = training.Checkpoint.from_result(result, tcfg, {"id": ckpt_id, "dataset": cfg.name})
    return RunOutcome(report, errors, ckpt, bundle)


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def errors_csv(errors: stats.ErrorSamples) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pass", "restricted_mse", "full_mse"])
    for i, (r, f) in enumerate(zip(errors.restricted, errors.full)):
        writer.writerow([i, repr(float(r)), repr(float(f))])
    return buf.getvalue()


def persist_run(outcome: RunOutcome, cfg: ExperimentConfig, directory: Path) -> Path:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {directory}: {exc}") from exc
    _write_atomic(directory / "config.json",
                  json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_atomic(directory / "report.json", outcome.report.to_text())
    _write_atomic(directory / "errors.csv", errors_csv(outcome.errors))
    training.save_checkpoint(outcome.checkpoint, directory / "checkpoint.lgck")
    return directory


def run_verdict(cfg: ExperimentConfig, seed: int | None = None) -> stats.GrangerReport:
    """One end-to-end Granger test; artifacts go to ``out_dir/<name>/seed<k>``."""
    seed = cfg.seeds[0] if seed is None else seed
    outcome = run_pipeline(cfg, seed)
    if cfg.out_dir:
        persist_run(outcome, cfg, Path(cfg.out_dir) / cfg.name / f"seed{seed}")
    return outcome.report


# ------------------------------------------------------------------- sweeps

@dataclass
class SweepRecord:
    knob: str
    value: float
    seeds: tuple
    p_values: tuple
    verdicts: tuple
    decision: bool | None
    error: str | None = None

    def row(self) -> dict:
        return {
            "knob": self.knob,
            "value": repr(float(self.value)),
            "seeds": " ".join(str(s) for s in self.seeds),
            "p_values": " ".join(repr(float(p)) for p in self.p_values),
            "verdicts": " ".join(self.verdicts),
            "decision": "" if self.decision is None else str(self.decision).lower(),
            "error": self.error or "",
        }


def granger_p_value(report: stats.GrangerReport) -> float:
    """p-value of H1 "full error < restricted error", whichever side was chosen."""
    p = report.ttest.p_one_sided
    return p if report.ttest.side == "full_less" else 1.0 - p


def seed_block(cfg: ExperimentConfig, k: int) -> tuple:
    base = cfg.seeds[0]
    return tuple(base + i for i in range(k))


def _seed_cell(args):
    cfg, seed = args
    rep = run_pipeline(cfg, seed).report
    return granger_p_value(rep), rep.verdict


def run_cells(cfg: ExperimentConfig, seeds) -> list:
    """``(p, verdict)`` per seed, in seed order; cells run in parallel when workers > 1."""
    jobs = [(cfg, s) for s in seeds]
    if cfg.workers == 1 or len(jobs) == 1:
        return [_seed_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
        return list(pool.map(_seed_cell, jobs))


def evaluate_gamma(cfg: ExperimentConfig, gamma: float, k_seeds: int | None = None) -> SweepRecord:
    """Majority vote of Granger detections over ``k_seeds`` runs at SNR ``gamma``."""
    seeds = seed_block(cfg, k_seeds or cfg.k_seeds)
    sub = replace(cfg, gamma=gamma, granger=True, out_dir=None)
    ps, verdicts = zip(*run_cells(sub, seeds))
    votes = sum(v == "granger" for v in verdicts)
    return SweepRecord("gamma", float(gamma), seeds, tuple(ps), tuple(verdicts),
                       votes * 2 > len(seeds))


@dataclass
class BisectionResult:
    gamma_star: float
    lo: float
    hi: float
    records: list


def snr_bisection(cfg: ExperimentConfig, lo: float | None = None, hi: float | None = None,
                  tol: float | None = None, k_seeds: int | None = None,
                  detect: Callable[[float], SweepRecord] | None = None) -> BisectionResult:
    """Bisect on the detection predicate for the critical SNR.

    Keeps ``detect(lo)`` false and ``detect(hi)`` true throughout and stops
    once ``hi - lo <= tol``.
    """
    lo = cfg.gamma_lo if lo is None else lo
    hi = cfg.gamma_hi if hi is None else hi
    tol = cfg.gamma_tol if tol is None else tol
    if not lo < hi:
        raise ConfigError("gamma bracket needs lo < hi")
    if detect is None:
        def detect(g):
            return evaluate_gamma(cfg, g, k_seeds)

    rec_lo, rec_hi = detect(lo), detect(hi)
    records = [rec_lo, rec_hi]
    if rec_lo.decision or not rec_hi.decision:
        raise BracketError(f"bracket [{lo}, {hi}] does not straddle the detection threshold "
                           f"(detect(lo)={rec_lo.decision}, detect(hi)={rec_hi.decision})",
                           rec_lo, rec_hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        rec = detect(mid)
        records.append(rec)
        if rec.decision:
            hi = mid
        else:
            lo = mid
        log.info("bisection: bracket [%.4f, %.4f]", lo, hi)
    records.sort(key=lambda r: r.value)
    return BisectionResult(0.5 * (lo + hi), lo, hi, records)


def seqlen_sweep(cfg: ExperimentConfig, taus=None) -> list:
    """Train and test once per sequence length; failed cells are recorded, not raised."""
    taus = cfg.taus if taus is None else tuple(taus)
    records = []
    for tau in taus:
        sub = replace(cfg, train=replace(cfg.train, seq_len=int(tau)), out_dir=None)
        try:
            ps, verdicts = zip(*run_cells(sub, cfg.seeds))
        except GrangerError as exc:
            records.append(SweepRecord("tau", float(tau), tuple(cfg.seeds), (), (), None,
                                       error=str(exc)))
            continue
        votes = sum(v == "granger" for v in verdicts)
        records.append(SweepRecord("tau", float(tau), tuple(cfg.seeds), tuple(ps),
                                   tuple(verdicts), votes * 2 > len(verdicts)))
    return sorted(records, key=lambda r: r.value)


RECORD_COLUMNS = ("knob", "value", "seeds", "p_values", "verdicts", "decision", "error")


def emit_results(records, out_dir, fmt: str = "csv", name: str = "results") -> Path:
    """Write sweep records, one row each, overwriting any previous file atomically."""
    records = list(records)
    if not records:
        raise ConfigError("no records to write")
    knobs = {r.knob for r in records}
    if len(knobs) > 1:
        raise MixedSweepError(f"records mix sweep knobs {sorted(knobs)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out_dir}: {exc}") from exc
    rows = [r.row() for r in sorted(records, key=lambda r: r.value)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=RECORD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        path, text = out_dir / f"{name}.csv", buf.getvalue()
    elif fmt in ("text", "structured-text", "json"):
        path = out_dir / f"{name}.json"
        text = json.dumps({"knob": knobs.pop(), "records": rows}, indent=2, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    _write_atomic(path, text)
    return path
