"""Mini-batch training with validation early stopping, and checkpoint files."""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .datagen import SeriesBundle, WindowSet, window_split
from .diffcore import Adam, AdamState
from .exceptions import (ConfigError, FormatError, GrangerError, NumericError, ParseError,
                         ShapeError, StorageError)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 10
    seq_len: int = 20
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    mc_samples: int = 1
    deterministic_latent: bool = False
    dropout: float = 0.3
    hidden: int = 5
    mlp_hidden: int = 5
    d_z: int = 1
    stop_yres_grad: bool = True
    yres_from_mean: bool = False
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.fractions = tuple(self.fractions)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.max_epochs > 0 and not self.patience < self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    def forward_options(self, train: bool) -> M.ForwardOptions:
        return M.ForwardOptions(train=train, dropout=self.dropout,
                                deterministic_latent=self.deterministic_latent,
                                yres_from_mean=self.yres_from_mean,
                                stop_yres_grad=self.stop_yres_grad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    initial_val_loss: float | None = None
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.val_loss)

    @property
    def best_val_loss(self):
        return None if self.best_epoch is None else self.val_loss[self.best_epoch]

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int):
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(noise))


def init_params(n_proxies: int, cfg: TrainConfig) -> M.ModelParams:
    init_rng, _, _ = _streams(cfg.seed)
    return M.ModelParams.init(n_proxies, cfg.d_z, cfg.hidden, cfg.mlp_hidden, init_rng)


def validation_loss(params: M.ModelParams, windows, cfg: TrainConfig) -> float:
    """Joint loss with every draw replaced by its mean; touches no state."""
    opts = M.ForwardOptions(train=False, dropout=cfg.dropout, deterministic_latent=True,
                            stop_yres_grad=cfg.stop_yres_grad)
    loss, _, _ = M.objective(params, windows, np.random.default_rng(0), 1, opts)
    return float(loss.value[0, 0])


@dataclass
class TrainResult:
    params: M.ModelParams
    history: TrainHistory
    optimizer: Adam
    windows: WindowSet

    def __iter__(self):
        # Allows ``params, history = train(...)``.
        return iter((self.params, self.history))


def train(bundle: SeriesBundle, cfg: TrainConfig, windows: WindowSet | None = None) -> TrainResult:
    """Fit the dual-decoder model; returns the best-validation parameters."""
    ws = window_split(bundle, cfg.seq_len, cfg.fractions) if windows is None else windows
    if len(ws.train) == 0 or len(ws.val) == 0:
        raise ConfigError("training and validation splits must be nonempty")
    _, shuffle_rng, noise_rng = _streams(cfg.seed)
    params = init_params(bundle.n_proxies, cfg)
    opt = Adam(lr=cfg.lr)
    history = TrainHistory()
    if cfg.max_epochs == 0:
        return TrainResult(params, history, opt, ws)

    history.initial_val_loss = validation_loss(params, ws.val, cfg)
    best = params.copy()
    best_loss = np.inf
    stale = 0
    train_opts = cfg.forward_options(train=True)
    n = len(ws.train)
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = ws.train.subset(order[lo:lo + cfg.batch_size])
            try:
                loss, grads = M.loss_and_grads(params, batch, noise_rng, cfg.mc_samples,
                                               train_opts)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            params.tensors = opt.step(params.tensors, grads)
            total += loss * len(batch)
            count += len(batch)
        val = validation_loss(params, ws.val, cfg)
        if not np.isfinite(val):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        history.train_loss.append(total / count)
        history.val_loss.append(val)
        if val < best_loss:
            best_loss, best, stale = val, params.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
        log.debug("epoch %d train %.4f val %.4f", epoch, total / count, val)
        if stale >= cfg.patience:
            break
    return TrainResult(best, history, opt, ws)


# ----------------------------------------------------------------- checkpoint
#
# Layout (all integers little-endian):
#   magic  b"LGCKPT\0\0"            8 bytes
#   version                          uint32
#   header length H                  uint64
#   header                           H bytes of UTF-8 JSON
#   payload                          concatenated float64 little-endian tensors
# The header lists every tensor as {name, shape, offset, count} (offset and
# count in float64 elements), the payload CRC-32, and the config/history/dims.

MAGIC = b"LGCKPT\0\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: M.ModelParams
    config: TrainConfig
    adam: dict = field(default_factory=dict)
    history: TrainHistory = field(default_factory=TrainHistory)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, result: TrainResult, cfg: TrainConfig, meta=None) -> "Checkpoint":
        return cls(result.params, cfg, dict(result.optimizer.states), result.history,
                   dict(meta or {}))


def _tensor_items(c: Checkpoint):
    for name in sorted(c.params.tensors):
        yield f"param/{name}", c.params.tensors[name]
    for name in sorted(c.adam):
        yield f"adam_m/{name}", c.adam[name].m
        yield f"adam_v/{name}", c.adam[name].v


def save_checkpoint(c: Checkpoint, path) -> None:
    path = Path(path)
    directory, chunks, offset = [], [], 0
    for name, arr in _tensor_items(c):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "dims": c.params.dims(),
        "tensors": directory,
        "adam_steps": {k: s.t for k, s in sorted(c.adam.items())},
        "config": c.config.to_dict(),
        "history": c.history.to_dict(),
        "meta": c.meta,
        "payload_crc32": zlib.crc32(payload),
        "payload_bytes": len(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_dims: dict | None = None) -> Checkpoint:
    """Read a checkpoint; raises before returning anything partial."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size:
        raise ParseError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header: {exc}") from exc
    payload = data[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ParseError(f"{path}: truncated payload ({len(payload)} of "
                         f"{header['payload_bytes']} bytes)")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ParseError(f"{path}: payload checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for entry in header["tensors"]:
        lo = entry["offset"]
        arr = flat[lo:lo + entry["count"]].reshape(entry["shape"]).astype(np.float64)
        arrays[entry["name"]] = arr

    dims = header["dims"]
    params = M.ModelParams(**dims)
    params.tensors = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    params.validate()
    if expected_dims is not None:
        probe = M.ModelParams(**{**dims, **expected_dims})
        for name, shape in probe.expected_shapes().items():
            got = params.tensors[name].shape
            if got != shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {got}, "
                                 f"run expects {shape}")
    adam = {}
    for name, t in header["adam_steps"].items():
        adam[name] = AdamState(arrays[f"adam_m/{name}"], arrays[f"adam_v/{name}"], t,
                               lr=header["config"]["lr"])
    try:
        config = TrainConfig.from_dict(header["config"])
        history = TrainHistory(**header["history"])
    except (TypeError, GrangerError) as exc:
        raise ParseError(f"{path}: invalid config block: {exc}") from exc
    return Checkpoint(params, config, adam, history, header.get("meta", {}))
