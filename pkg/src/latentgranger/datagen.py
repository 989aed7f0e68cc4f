"""Synthetic confounded processes, CSV loading, standardization and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import (ConfigError, DegenerateError, DomainError, ParseError,
                         SchemaError, StorageError)

MAX_LAG = 4
Z_INIT = 0.5

# Noise levels of the generative equations; only the Y noise is configurable.
Z_NOISE = 0.01
U_NOISE = 0.05
X_NOISE = 0.01
DEFAULT_Y_NOISE = {1: 0.01, 2: 0.5}


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


@dataclass
class SeriesBundle:
    """Aligned channels of one experiment.

    ``u`` has shape ``(n_proxies, T)``; ``x``, ``y`` and ``z_true`` are 1-D.
    ``signal`` holds the noiseless part of ``y`` for synthetic data.
    """

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    signal: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        if self.z_true is not None:
            self.z_true = np.asarray(self.z_true, dtype=np.float64)
        T = len(self.y)
        if self.x.shape != (T,) or self.u.shape[1] != T:
            raise ConfigError(f"channel lengths differ: x={self.x.shape}, y={self.y.shape}, "
                              f"u={self.u.shape}")
        if self.z_true is not None and self.z_true.shape != (T,):
            raise ConfigError(f"z_true has shape {self.z_true.shape}, expected ({T},)")
        for name in ("x", "y", "u"):
            if np.isnan(getattr(self, name)).any():
                raise ParseError(f"channel {name} contains NaN")

    @property
    def T(self) -> int:
        return len(self.y)

    @property
    def n_proxies(self) -> int:
        return self.u.shape[0]

    def equals(self, other: "SeriesBundle") -> bool:
        """Bit-exact comparison of all channels and metadata."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (same(self.x, other.x) and same(self.y, other.y) and same(self.u, other.u)
                and same(self.z_true, other.z_true) and self.meta == other.meta)


@dataclass
class GenConfig:
    dataset_id: int = 1
    granger: bool = True
    T: int = 1000
    noise_std_y: float | None = None
    seed: int = 0
    burn_in: int = 50
    # Test hook: scale every noise term (0 gives the noiseless recursions).
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.dataset_id not in (1, 2):
            raise ConfigError(f"dataset_id must be 1 or 2, got {self.dataset_id}")
        if self.T < 50:
            raise ConfigError(f"T must be >= 50, got {self.T}")
        if self.burn_in < 10:
            raise ConfigError(f"burn_in must be >= 10, got {self.burn_in}")
        if self.noise_std_y is None:
            self.noise_std_y = DEFAULT_Y_NOISE[self.dataset_id]
        if self.noise_std_y < 0:
            raise ConfigError("noise_std_y must be >= 0")


def _simulate_common(cfg: GenConfig, rng: np.random.Generator):
    n = cfg.burn_in + cfg.T + MAX_LAG
    k = cfg.noise_scale
    z_eps = rng.standard_normal(n) * Z_NOISE * k
    u_eps = rng.standard_normal(n) * U_NOISE * k
    x_eps = rng.standard_normal(n) * X_NOISE * k
    y_eps = rng.standard_normal(n) * cfg.noise_std_y * k
    z = np.empty(n)
    z[0] = Z_INIT
    for t in range(1, n):
        z[t] = math.tanh(z[t - 1]) + z_eps[t]
    u = z * z + u_eps
    x = np.empty(n)
    x[:2] = _sigmoid(z[0]) + x_eps[:2]
    x[2:] = _sigmoid(z[:-2]) + x_eps[2:]
    return n, z, u, x, y_eps


def _finish(cfg, name, n, z, u, x, signal, y_eps) -> SeriesBundle:
    keep = slice(n - cfg.T, n)
    y = signal + y_eps
    return SeriesBundle(
        x=x[keep].copy(), y=y[keep].copy(), u=u[keep].reshape(1, -1).copy(),
        z_true=z[keep].copy(), signal=signal[keep].copy(),
        meta={"name": name, "seed": cfg.seed, "granger_flag": cfg.granger,
              "noise_std_y": cfg.noise_std_y},
    )


def gen_dataset1(cfg: GenConfig, rng: np.random.Generator | None = None) -> SeriesBundle:
    """Y driven by sigmoid(Z lagged 4) and, with Granger on, sigmoid(X lagged 2)."""
    if cfg.dataset_id != 1:
        raise ConfigError("gen_dataset1 needs dataset_id = 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, z, u, x, y_eps = _simulate_common(cfg, rng)
    signal = np.zeros(n)
    signal[MAX_LAG:] = _sigmoid(z[:-4])
    if cfg.granger:
        signal[MAX_LAG:] += _sigmoid(x[2:-2])
    y_eps[:MAX_LAG] = 0.0
    return _finish(cfg, "synth1", n, z, u, x, signal, y_eps)


def gen_dataset2(cfg: GenConfig, rng: np.random.Generator | None = None) -> SeriesBundle:
    """Y = Z[t-3] Z[t-4] (+ X[t-1] X[t-2]) + noise."""
    if cfg.dataset_id != 2:
        raise ConfigError("gen_dataset2 needs dataset_id = 2")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, z, u, x, y_eps = _simulate_common(cfg, rng)
    signal = np.zeros(n)
    signal[MAX_LAG:] = z[1:-3] * z[:-4]
    if cfg.granger:
        signal[MAX_LAG:] += x[3:-1] * x[2:-2]
    y_eps[:MAX_LAG] = 0.0
    return _finish(cfg, "synth2", n, z, u, x, signal, y_eps)


def generate(cfg: GenConfig, rng: np.random.Generator | None = None) -> SeriesBundle:
    return (gen_dataset1 if cfg.dataset_id == 1 else gen_dataset2)(cfg, rng)


# ------------------------------------------------------------------------ SNR

def compute_snr(signal, sigma: float) -> float:
    """Mean absolute noiseless signal over the noise standard deviation."""
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    s = np.asarray(signal, dtype=np.float64)
    return float(np.mean(np.abs(s)) / sigma)


def mean_abs_signal(cfg: GenConfig) -> float:
    clean = generate(replace(cfg, noise_std_y=0.0))
    return float(np.mean(np.abs(clean.signal)))


def sigma_for_target_snr(cfg: GenConfig, gamma_target: float) -> float:
    """Y-noise std that makes the noiseless signal of ``cfg`` hit ``gamma_target``.

    The X, Z and U noise terms keep their fixed values and the signal does not
    depend on the Y noise, so a zero-Y-noise run under the same seed gives it.
    """
    if not gamma_target > 0:
        raise DomainError(f"gamma_target must be > 0, got {gamma_target}")
    return mean_abs_signal(cfg) / gamma_target


# ------------------------------------------------------------------------ CSV

DEFAULT_COLUMNS = {"t": "t", "x": "x", "y": "y", "u": ["u1"], "z": None}


def load_csv_bundle(path, column_map: dict | None = None, name: str | None = None) -> SeriesBundle:
    """Read a bundle from a CSV file with a header row.

    ``column_map`` maps ``x``, ``y`` to column names, ``u`` to a list of proxy
    columns and optionally ``z`` to a ground-truth column. When ``u`` is not
    given, every column named ``u<k>`` is used in numeric order.
    """
    path = Path(path)
    cmap = dict(column_map or {})
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ParseError(f"{path}: empty file") from None
            rows = list(reader)
    except FileNotFoundError:
        raise ConfigError(f"CSV file not found: {path}") from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc

    xcol, ycol = cmap.get("x", "x"), cmap.get("y", "y")
    ucols = cmap.get("u")
    if ucols is None:
        ucols = sorted((h for h in header if h[:1] == "u" and h[1:].isdigit()),
                       key=lambda h: int(h[1:]))
        if not ucols:
            raise SchemaError(f"{path}: no proxy columns (u1, u2, ...) found")
    elif isinstance(ucols, str):
        ucols = [ucols]
    zcol = cmap.get("z", "z" if "z" in header else None)

    wanted = [xcol, ycol, *ucols] + ([zcol] if zcol else [])
    index = {}
    for col in wanted:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
        index[col] = header.index(col)

    data = {col: np.empty(len(rows)) for col in wanted}
    for i, row in enumerate(rows):
        line = i + 1  # data rows count from 1; the header is not a row
        if len(row) != len(header):
            raise ParseError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        for col in wanted:
            cell = row[index[col]].strip()
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric value {cell!r} in column {col!r} "
                                 f"at row {line}") from None
            if not math.isfinite(value):
                raise ParseError(f"{path}: non-finite value in column {col!r} at row {line}")
            data[col][i] = value
    if not rows:
        raise ParseError(f"{path}: no data rows")

    return SeriesBundle(
        x=data[xcol], y=data[ycol], u=np.vstack([data[c] for c in ucols]),
        z_true=data[zcol] if zcol else None,
        meta={"name": name or path.stem, "seed": None, "granger_flag": None,
              "noise_std_y": None},
    )


def write_csv_bundle(bundle: SeriesBundle, path) -> None:
    path = Path(path)
    header = ["t", "x", "y"] + [f"u{k + 1}" for k in range(bundle.n_proxies)]
    if bundle.z_true is not None:
        header.append("z")
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for t in range(bundle.T):
                row = [str(t), repr(float(bundle.x[t])), repr(float(bundle.y[t]))]
                row += [repr(float(v)) for v in bundle.u[:, t]]
                if bundle.z_true is not None:
                    row.append(repr(float(bundle.z_true[t])))
                writer.writerow(row)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------ standardization

def split_bounds(T: int, fractions=(0.8, 0.1, 0.1)) -> list[tuple[int, int]]:
    """Chronological ``[lo, hi)`` index ranges for train/val/test."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_train = int(round(T * fractions[0]))
    n_val = int(round(T * fractions[1]))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]


@dataclass
class ChannelStats:
    mean: dict
    std: dict


def standardize(bundle: SeriesBundle, stats_from: str = "train",
                fractions=(0.8, 0.1, 0.1)) -> tuple[SeriesBundle, ChannelStats]:
    """Z-score every observed channel with statistics from one split."""
    names = ("train", "val", "test")
    if stats_from not in names:
        raise ConfigError(f"stats_from must be one of {names}")
    lo, hi = split_bounds(bundle.T, fractions)[names.index(stats_from)]
    means, stds, out = {}, {}, {}
    channels = {"x": bundle.x, "y": bundle.y}
    channels.update({f"u{k + 1}": bundle.u[k] for k in range(bundle.n_proxies)})
    for key, v in channels.items():
        seg = v[lo:hi]
        mu, sd = float(seg.mean()), float(seg.std())
        if not sd > 0:
            raise DegenerateError(f"channel {key} has zero variance on the {stats_from} split")
        means[key], stds[key] = mu, sd
        out[key] = (v - mu) / sd
    u = np.vstack([out[f"u{k + 1}"] for k in range(bundle.n_proxies)])
    new = SeriesBundle(out["x"], out["y"], u, bundle.z_true, dict(bundle.meta), None)
    return new, ChannelStats(means, stds)


def invert_standardize(bundle: SeriesBundle, stats: ChannelStats) -> SeriesBundle:
    def inv(key, v):
        return v * stats.std[key] + stats.mean[key]

    u = np.vstack([inv(f"u{k + 1}", bundle.u[k]) for k in range(bundle.n_proxies)])
    return SeriesBundle(inv("x", bundle.x), inv("y", bundle.y), u, bundle.z_true,
                        dict(bundle.meta), None)


# ------------------------------------------------------------------ windowing

@dataclass
class Windows:
    """Stacked windows for one split.

    Arrays are ``(N, tau)`` for ``x``/``y``, ``(N, tau, n_proxies)`` for ``u``;
    ``target[:, k]`` is ``y`` one step after ``y[:, k]`` so the last column is
    the next-step target of the window. ``start`` holds absolute indices.
    """

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    target: np.ndarray
    start: np.ndarray

    def __len__(self):
        return len(self.start)

    def subset(self, idx) -> "Windows":
        return Windows(self.x[idx], self.y[idx], self.u[idx], self.target[idx], self.start[idx])

    @property
    def next_target(self) -> np.ndarray:
        return self.target[:, -1]


@dataclass
class WindowSet:
    tau: int
    train: Windows
    val: Windows
    test: Windows
    bounds: list

    def split(self, name: str) -> Windows:
        return getattr(self, name)


def _windows(bundle: SeriesBundle, lo: int, hi: int, tau: int) -> Windows:
    # Input steps s..s+tau-1 and targets s+1..s+tau must all lie in [lo, hi).
    starts = np.arange(lo, hi - tau)
    idx = starts[:, None] + np.arange(tau)[None, :]
    return Windows(
        x=bundle.x[idx], y=bundle.y[idx], u=np.transpose(bundle.u[:, idx], (1, 2, 0)),
        target=bundle.y[idx + 1], start=starts,
    )


def window_split(bundle: SeriesBundle, tau: int, fractions=(0.8, 0.1, 0.1)) -> WindowSet:
    """Split chronologically, then cut overlapping windows inside each split.

    A split of length ``L`` yields ``L - tau`` windows.
    """
    if tau < 2:
        raise ConfigError(f"sequence length must be >= 2, got {tau}")
    bounds = split_bounds(bundle.T, fractions)
    parts = []
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        if hi - lo - tau < 1:
            raise ConfigError(f"sequence length {tau} too large for the {name} split "
                              f"({hi - lo} steps)")
        parts.append(_windows(bundle, lo, hi, tau))
    return WindowSet(tau, *parts, bounds=bounds)
