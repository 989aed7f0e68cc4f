"""Dual-decoder recurrent model.

Four GRU encoders (proxies U, latent samples, Y, X) and three one-hidden-layer
MLP heads:

* ``f1`` maps the proxy state to the filtering distribution of the substitute
  confounder, ``(mu_z, softplus(.))``;
* ``f2`` maps ``[h_Y, h_Z]`` to the restricted predictive Gaussian for Y;
* ``f3`` maps ``[yres, h_X]`` to the full predictive Gaussian, where ``yres``
  is a draw from the restricted head.

All sequence tensors are processed time-major after the recurrences: the row
``t * B + b`` of a stacked matrix belongs to window ``b`` at step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .exceptions import NumericError, ShapeError

GATES = ("z", "r", "n")
STREAMS = ("u", "z", "y", "x")
HEADS = ("f1", "f2", "f3")


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class ModelParams:
    """Named float64 tensors plus the dimensions that shape them.

    Tensor names: ``gru_<stream>.{W,U,b}_<gate>`` and ``<head>.{W1,b1,W2,b2}``.
    """

    n_proxies: int = 1
    d_z: int = 1
    hidden: int = 5
    mlp_hidden: int = 5
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_proxies=1, d_z=1, hidden=5, mlp_hidden=5, rng=None) -> "ModelParams":
        rng = np.random.default_rng(0) if rng is None else rng
        p = cls(n_proxies, d_z, hidden, mlp_hidden)
        for name, shape in p.expected_shapes().items():
            if ".b" in name:
                p.tensors[name] = np.zeros(shape)
            else:
                p.tensors[name] = _glorot(rng, *shape)
        return p

    def expected_shapes(self) -> dict:
        H, M = self.hidden, self.mlp_hidden
        inputs = {"u": self.n_proxies, "z": self.d_z, "y": 1, "x": 1}
        shapes = {}
        for s in STREAMS:
            for g in GATES:
                shapes[f"gru_{s}.W_{g}"] = (inputs[s], H)
                shapes[f"gru_{s}.U_{g}"] = (H, H)
                shapes[f"gru_{s}.b_{g}"] = (1, H)
        heads = {"f1": (H, 2 * self.d_z), "f2": (2 * H, 2), "f3": (1 + H, 2)}
        for head, (fan_in, fan_out) in heads.items():
            shapes[f"{head}.W1"] = (fan_in, M)
            shapes[f"{head}.b1"] = (1, M)
            shapes[f"{head}.W2"] = (M, fan_out)
            shapes[f"{head}.b2"] = (1, fan_out)
        return shapes

    def validate(self):
        expected = self.expected_shapes()
        missing = set(expected) - set(self.tensors)
        if missing:
            raise ShapeError(f"missing tensors: {sorted(missing)}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ShapeError(f"tensor {name} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericError(f"tensor {name} has non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(self.n_proxies, self.d_z, self.hidden, self.mlp_hidden,
                           {k: v.copy() for k, v in self.tensors.items()})

    def on_tape(self, tape: dc.Tape) -> dict:
        return {k: tape.var(v, name=k) for k, v in self.tensors.items()}

    def dims(self) -> dict:
        return {"n_proxies": self.n_proxies, "d_z": self.d_z, "hidden": self.hidden,
                "mlp_hidden": self.mlp_hidden}


def gru_params(P: dict, stream: str) -> tuple:
    pre = f"gru_{stream}."
    return tuple(P[pre + f"{w}_{g}"] for g in GATES for w in ("W", "U", "b"))


def gru_step(p: tuple, h, x_in) -> dc.Var:
    """One GRU update; ``p`` is ``(W_z, U_z, b_z, W_r, U_r, b_r, W_n, U_n, b_n)``."""
    return dc.gru_cell(x_in, h, *p)


def gru_step_reference(p: tuple, h, x_in) -> dc.Var:
    """Same update composed from primitive tape ops (used to check ``gru_step``)."""
    wz, uz, bz, wr, ur, br, wn, un, bn = p
    z = dc.sigmoid(dc.matmul(x_in, wz) + dc.matmul(h, uz) + bz)
    r = dc.sigmoid(dc.matmul(x_in, wr) + dc.matmul(h, ur) + br)
    n = dc.tanh(dc.matmul(x_in, wn) + dc.mul(r, dc.matmul(h, un)) + bn)
    return dc.mul(1.0 - z, n) + dc.mul(z, h)


def run_gru(P: dict, stream: str, inputs: list, tape: dc.Tape) -> list:
    """Hidden states after each step, starting from the zero state."""
    p = gru_params(P, stream)
    batch = inputs[0].value.shape[0] if isinstance(inputs[0], dc.Var) else inputs[0].shape[0]
    hidden = p[1].value.shape[0]
    h = tape.const(np.zeros((batch, hidden)))
    states = []
    for x_t in inputs:
        h = gru_step(p, h, x_t)
        states.append(h)
    return states


def mlp(P: dict, head: str, v, dropout: float, train: bool, rng) -> dc.Var:
    hid = dc.relu(dc.matmul(v, P[f"{head}.W1"]) + P[f"{head}.b1"])
    hid = dc.dropout(hid, dropout, train, rng)
    return dc.matmul(hid, P[f"{head}.W2"]) + P[f"{head}.b2"]


def gaussian_head(out: dc.Var, dim: int):
    mu = dc.columns(out, 0, dim)
    sigma = dc.softplus(dc.columns(out, dim, 2 * dim))
    return mu, sigma


@dataclass
class ForwardOptions:
    """Knobs of one forward pass.

    ``deterministic_latent`` replaces every draw by its mean (``zhat = mu_z``
    and ``yres = mu_r``). ``yres_from_mean`` feeds ``mu_r`` to the full head
    but keeps the latent draw. ``stop_yres_grad`` blocks the full-head
    gradient from reaching the restricted head through ``yres``.
    """

    train: bool = False
    dropout: float = 0.3
    deterministic_latent: bool = False
    yres_from_mean: bool = False
    stop_yres_grad: bool = True


@dataclass
class EncoderOutput:
    mu: dc.Var
    sigma: dc.Var
    zhat: dc.Var
    steps: int

    def at(self, t: int, batch: int):
        lo, hi = t * batch, (t + 1) * batch
        return tuple(v.value[lo:hi] for v in (self.mu, self.sigma, self.zhat))


@dataclass
class DualPrediction:
    mu_r: dc.Var
    sigma_r: dc.Var
    yres: dc.Var
    mu_f: dc.Var
    sigma_f: dc.Var
    zhat: EncoderOutput
    batch: int

    def last(self, node: dc.Var) -> np.ndarray:
        """Values at the final window step, one per window."""
        return node.value[-self.batch:, 0]


def _stack(states):
    return states[0] if len(states) == 1 else dc.concat(states, axis=0)


def _steps_as_inputs(tape, arr):
    """``(B, tau[, k])`` array -> list of ``(B, k)`` tape constants."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return [tape.const(arr[:, t, :]) for t in range(arr.shape[1])]


def encode_confounder(P: dict, u_window, tape: dc.Tape, rng, opts: ForwardOptions,
                      d_z: int) -> EncoderOutput:
    """Filtering distribution of the substitute confounder at each step.

    The output at step ``t`` depends on ``u[:, :t+1]`` only.
    """
    u_steps = _steps_as_inputs(tape, u_window)
    if not u_steps:
        raise ShapeError("encode_confounder needs at least one step")
    hu = _stack(run_gru(P, "u", u_steps, tape))
    mu, sigma = gaussian_head(mlp(P, "f1", hu, opts.dropout, opts.train, rng), d_z)
    if opts.deterministic_latent:
        zhat = mu
    else:
        zhat = dc.reparam_sample(mu, sigma, rng)
    return EncoderOutput(mu, sigma, zhat, len(u_steps))


def restricted_forward(P: dict, y_window, zhat: EncoderOutput, tape: dc.Tape, rng,
                       opts: ForwardOptions):
    """``(mu_r, sigma_r)`` for Y one step ahead, from Y history and latent draws."""
    y_steps = _steps_as_inputs(tape, y_window)
    if len(y_steps) != zhat.steps:
        raise ShapeError(f"y window has {len(y_steps)} steps, latent has {zhat.steps}")
    batch = y_steps[0].value.shape[0]
    z_steps = [dc.rows(zhat.zhat, t * batch, (t + 1) * batch) for t in range(zhat.steps)]
    hy = _stack(run_gru(P, "y", y_steps, tape))
    hz = _stack(run_gru(P, "z", z_steps, tape))
    out = mlp(P, "f2", dc.concat([hy, hz], axis=1), opts.dropout, opts.train, rng)
    return gaussian_head(out, 1)


def full_forward(P: dict, yres, h_x, opts: ForwardOptions, rng):
    """``(mu_f, sigma_f)`` from a restricted-head draw and the X state."""
    out = mlp(P, "f3", dc.concat([yres, h_x], axis=1), opts.dropout, opts.train, rng)
    return gaussian_head(out, 1)


def forward(params: ModelParams, windows, tape: dc.Tape, rng,
            opts: ForwardOptions | None = None, P: dict | None = None) -> DualPrediction:
    """Run the whole network over a batch of windows (see ``datagen.Windows``)."""
    opts = opts or ForwardOptions()
    P = params.on_tape(tape) if P is None else P
    batch = windows.y.shape[0]
    enc = encode_confounder(P, windows.u, tape, rng, opts, params.d_z)
    mu_r, sigma_r = restricted_forward(P, windows.y, enc, tape, rng, opts)
    if opts.deterministic_latent or opts.yres_from_mean:
        yres = mu_r
    else:
        yres = dc.reparam_sample(mu_r, sigma_r, rng)
    if opts.stop_yres_grad:
        yres = dc.stop_gradient(yres)
    hx = _stack(run_gru(P, "x", _steps_as_inputs(tape, windows.x), tape))
    mu_f, sigma_f = full_forward(P, yres, hx, opts, rng)
    return DualPrediction(mu_r, sigma_r, yres, mu_f, sigma_f, enc, batch)


def stacked_targets(windows) -> np.ndarray:
    """``(B, tau)`` targets -> ``(tau * B, 1)`` time-major column."""
    return np.ascontiguousarray(windows.target.T).reshape(-1, 1)


def objective(params: ModelParams, windows, rng, mc_samples: int = 1,
              opts: ForwardOptions | None = None, tape: dc.Tape | None = None):
    """Negative joint log-likelihood of both heads, averaged over the batch.

    Returns ``(loss, tape, P)`` so the caller can run the backward pass.
    ``mc_samples`` pathwise draws estimate the expectation over the latent.
    """
    if len(windows) == 0:
        raise ShapeError("objective needs a nonempty batch")
    tape = dc.Tape() if tape is None else tape
    P = params.on_tape(tape)
    target = tape.const(stacked_targets(windows))
    batch = windows.y.shape[0]
    terms = []
    for _ in range(mc_samples):
        pred = forward(params, windows, tape, rng, opts, P=P)
        ll = dc.gaussian_logpdf(target, pred.mu_f, pred.sigma_f) \
            + dc.gaussian_logpdf(target, pred.mu_r, pred.sigma_r)
        bad = ~np.isfinite(ll.value[:, 0])
        if bad.any():
            raise NumericError(f"non-finite log-likelihood at window step "
                               f"{int(np.argmax(bad)) // batch}")
        terms.append(dc.total(ll))
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    loss = dc.scale(loss, -1.0 / (batch * mc_samples))
    if not np.isfinite(loss.value[0, 0]):
        raise NumericError("non-finite loss")
    return loss, tape, P


def loss_and_grads(params: ModelParams, windows, rng, mc_samples=1, opts=None):
    loss, tape, P = objective(params, windows, rng, mc_samples, opts)
    tape.backward(loss)
    return float(loss.value[0, 0]), {k: v.grad for k, v in P.items()}
