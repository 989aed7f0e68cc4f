"""Small dense-matrix reverse-mode differentiation engine.

Every value is a 2-D float64 array. Operations on :class:`Var` objects are
recorded on the :class:`Tape` that owns them (define-by-run); one call to
:meth:`Tape.backward` fills ``grad`` for every node reachable from the loss.

Batches are laid out row-wise: a hidden state for ``B`` sequences is a
``(B, hidden)`` matrix and weights are ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DomainError, NumericError, ShapeError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SAFE = 30.0
_TINY = np.finfo(np.float64).tiny


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with shape {arr.shape}")
    return arr


class Var:
    """A node on a tape: forward value plus accumulated gradient."""

    __slots__ = ("tape", "value", "grad", "_backward", "_parents", "name")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), backward=None, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Append-only record of operations.

    Nodes only ever reference earlier nodes, so the reverse of the creation
    order is a valid topological order for the backward sweep.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, name=None) -> Var:
        """Leaf node (parameter or input)."""
        node = Var(self, as_matrix(value), name=name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Var:
        return self.var(value)

    def _record(self, value, parents, backward) -> Var:
        node = Var(self, value, parents, backward)
        self.nodes.append(node)
        return node

    def backward(self, loss: Var) -> None:
        if loss.tape is not self:
            raise ContractError("loss does not belong to this tape")
        if loss.value.shape != (1, 1):
            raise ContractError(f"loss must be a scalar node, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)


def _tape_of(*items) -> Tape:
    for item in items:
        if isinstance(item, Var):
            return item.tape
    raise ContractError("operation needs at least one tape value")


def _lift(tape: Tape, item) -> Var:
    if isinstance(item, Var):
        if item.tape is not tape:
            raise ContractError("mixing values from different tapes")
        return item
    return tape.const(item)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- plain math

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # |x| > 30 is saturated to machine precision; clip keeps exp finite.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def softplus_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    safe = np.minimum(x, _SAFE)
    # floor keeps the output strictly positive where log1p(exp(x)) underflows
    return np.maximum(np.where(x > _SAFE, x, np.log1p(np.exp(safe))), _TINY)


def _require_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


# ------------------------------------------------------------------- tape ops

def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def backward(g):
        return g @ bv.T, av.T @ g

    return tape._record(av @ bv, (a, b), backward)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.value.shape, b.value.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.value.shape, b.value.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    """Elementwise (Hadamard) product with row/column broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record(av * bv, (a, b), backward)


def scale(a: Var, c: float) -> Var:
    def backward(g):
        return (g * c,)

    return a.tape._record(a.value * c, (a,), backward)


def square(a: Var) -> Var:
    av = a.value

    def backward(g):
        return (2.0 * av * g,)

    return a.tape._record(av * av, (a,), backward)


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of non-positive value")

    def backward(g):
        return (g / av,)

    return a.tape._record(np.log(av), (a,), backward)


def activation(kind: str, m: Var) -> Var:
    """Elementwise sigmoid, tanh, relu or softplus."""
    x = m.value
    _require_finite(x, kind)
    if kind == "sigmoid":
        out = sigmoid_np(x)
        local = out * (1.0 - out)
    elif kind == "tanh":
        out = np.tanh(x)
        local = 1.0 - out * out
    elif kind == "relu":
        out = np.maximum(x, 0.0)
        local = (x > 0).astype(np.float64)
    elif kind == "softplus":
        out = softplus_np(x)
        local = sigmoid_np(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")

    def backward(g):
        return (g * local,)

    return m.tape._record(out, (m,), backward)


def sigmoid(m: Var) -> Var:
    return activation("sigmoid", m)


def tanh(m: Var) -> Var:
    return activation("tanh", m)


def relu(m: Var) -> Var:
    return activation("relu", m)


def softplus(m: Var) -> Var:
    return activation("softplus", m)


def concat(parts, axis: int = 1) -> Var:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from exc
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def backward(g):
        if axis == 1:
            return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return tape._record(out, tuple(parts), backward)


def columns(a: Var, lo: int, hi: int) -> Var:
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return (full,)

    return a.tape._record(a.value[:, lo:hi], (a,), backward)


def rows(a: Var, lo: int, hi: int) -> Var:
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return a.tape._record(a.value[lo:hi], (a,), backward)


def gru_cell(x, h, wz, uz, bz, wr, ur, br, wn, un, bn) -> Var:
    """Fused GRU update with a hand-derived backward pass.

    z = sig(x wz + h uz + bz), r = sig(x wr + h ur + br),
    n = tanh(x wn + r * (h un) + bn), h' = (1 - z) * n + z * h.
    """
    tape = _tape_of(x, h, wz)
    args = [_lift(tape, a) for a in (x, h, wz, uz, bz, wr, ur, br, wn, un, bn)]
    xv, hv, wzv, uzv, bzv, wrv, urv, brv, wnv, unv, bnv = (a.value for a in args)
    if xv.shape[1] != wzv.shape[0] or hv.shape[1] != uzv.shape[0]:
        raise ShapeError(f"gru_cell: input {xv.shape} / state {hv.shape} do not match "
                         f"weights {wzv.shape} / {uzv.shape}")
    z = sigmoid_np(xv @ wzv + hv @ uzv + bzv)
    r = sigmoid_np(xv @ wrv + hv @ urv + brv)
    hn = hv @ unv
    n = np.tanh(xv @ wnv + r * hn + bnv)
    out = (1.0 - z) * n + z * hv

    def backward(g):
        dan = g * (1.0 - z) * (1.0 - n * n)
        daz = g * (hv - n) * z * (1.0 - z)
        dar = dan * hn * r * (1.0 - r)
        dhn = dan * r
        dx = daz @ wzv.T + dar @ wrv.T + dan @ wnv.T
        dh = g * z + daz @ uzv.T + dar @ urv.T + dhn @ unv.T
        return (dx, dh,
                xv.T @ daz, hv.T @ daz, daz.sum(axis=0, keepdims=True),
                xv.T @ dar, hv.T @ dar, dar.sum(axis=0, keepdims=True),
                xv.T @ dan, hv.T @ dhn, dan.sum(axis=0, keepdims=True))

    return tape._record(out, tuple(args), backward)


def total(a: Var) -> Var:
    """Sum of all entries, as a 1x1 node."""
    shape = a.value.shape

    def backward(g):
        return (np.full(shape, g[0, 0]),)

    return a.tape._record(np.array([[a.value.sum()]]), (a,), backward)


def stop_gradient(a: Var) -> Var:
    """Same value, no gradient flow back into ``a``."""
    return a.tape.const(a.value.copy())


def gaussian_logpdf(y, mu, sigma) -> Var:
    """Elementwise log N(y; mu, sigma^2)."""
    tape = _tape_of(y, mu, sigma)
    y, mu, sigma = _lift(tape, y), _lift(tape, mu), _lift(tape, sigma)
    yv, mv, sv = y.value, mu.value, sigma.value
    if np.any(sv <= 0):
        raise DomainError("gaussian_logpdf requires sigma > 0")
    diff = yv - mv
    inv_var = 1.0 / (sv * sv)
    out = -LOG_SQRT_2PI - np.log(sv) - 0.5 * diff * diff * inv_var

    def backward(g):
        dmu = g * diff * inv_var
        dsig = g * (diff * diff * inv_var - 1.0) / sv
        return (_unbroadcast(-dmu, yv.shape), _unbroadcast(dmu, mv.shape),
                _unbroadcast(dsig, sv.shape))

    return tape._record(out, (y, mu, sigma), backward)


def reparam_sample(mu, sigma, rng: np.random.Generator) -> Var:
    """Pathwise Gaussian draw ``mu + sigma * eps``; eps is a tape constant."""
    tape = _tape_of(mu, sigma)
    mu, sigma = _lift(tape, mu), _lift(tape, sigma)
    if np.any(sigma.value < 0):
        raise DomainError("reparam_sample requires sigma >= 0")
    eps = rng.standard_normal(np.broadcast_shapes(mu.value.shape, sigma.value.shape))
    sv = sigma.value
    out = mu.value + sv * eps

    def backward(g):
        return _unbroadcast(g, mu.value.shape), _unbroadcast(g * eps, sv.shape)

    return tape._record(out, (mu, sigma), backward)


def dropout(m: Var, rate: float, train: bool, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return m
    keep = (rng.random(m.value.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return m.tape._record(m.value * keep, (m,), backward)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected ADAM update. Returns ``(new_param, new_state)``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """ADAM over a dict of named parameter arrays."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for name, value in params.items():
            state = self.states.get(name)
            if state is None:
                state = AdamState.zeros_like(value, lr=self.lr, beta1=self.beta1,
                                             beta2=self.beta2, eps=self.eps)
            out[name], self.states[name] = adam_step(value, grads[name], state)
        return out
