import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentgranger import diffcore as dc
from latentgranger.exceptions import ContractError, DomainError, NumericError, ShapeError

from .helpers import finite_difference_check


def test_matmul_identity():
    tape = dc.Tape()
    out = dc.matmul(tape.var(np.eye(2)), tape.var([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_matmul_hand_product():
    tape = dc.Tape()
    out = tape.var([[1, 2], [3, 4]]) @ tape.var([[5], [6]])
    np.testing.assert_array_equal(out.value, [[17], [39]])


def test_matmul_shape_error_names_shapes():
    tape = dc.Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(tape.var(np.ones((2, 3))), tape.var(np.ones((2, 3))))


@pytest.mark.parametrize("kind,x,expected", [
    ("sigmoid", 0.0, 0.5),
    ("softplus", 0.0, math.log(2.0)),
    ("relu", -1.5, 0.0),
    ("tanh", 0.0, 0.0),
])
def test_activation_values(kind, x, expected):
    tape = dc.Tape()
    out = dc.activation(kind, tape.var(x))
    assert out.value[0, 0] == pytest.approx(expected, abs=1e-15)


def test_softplus_large_input_is_identity():
    tape = dc.Tape()
    out = dc.softplus(tape.var([[31.0, 1000.0]]))
    np.testing.assert_array_equal(out.value, [[31.0, 1000.0]])


def test_activation_rejects_non_finite():
    tape = dc.Tape()
    with pytest.raises(NumericError):
        dc.sigmoid(tape.var([[np.nan]]))


def test_unknown_activation():
    tape = dc.Tape()
    with pytest.raises(ValueError):
        dc.activation("gelu", tape.var(1.0))


def test_backward_square():
    tape = dc.Tape()
    x = tape.var(3.0)
    tape.backward(dc.square(x))
    assert x.grad[0, 0] == 6.0


def test_backward_sigmoid_at_zero():
    tape = dc.Tape()
    x = tape.var(0.0)
    tape.backward(dc.sigmoid(x))
    assert x.grad[0, 0] == 0.25


def test_backward_requires_scalar():
    tape = dc.Tape()
    x = tape.var(np.ones((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(x * 2.0)


def test_unreached_nodes_get_zero_gradient():
    tape = dc.Tape()
    x, unused = tape.var(2.0), tape.var(np.ones((3, 2)))
    tape.backward(dc.square(x))
    np.testing.assert_array_equal(unused.grad, np.zeros((3, 2)))


def test_two_layer_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = {"W1": rng.normal(size=(4, 6)), "b1": rng.normal(size=(1, 6)),
              "W2": rng.normal(size=(6, 2)), "b2": rng.normal(size=(1, 2))}
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 2))

    def loss_fn(tape, P):
        h = dc.tanh(dc.matmul(x, P["W1"]) + P["b1"])
        out = dc.matmul(h, P["W2"]) + P["b2"]
        return dc.total(dc.square(out - target))

    assert finite_difference_check(loss_fn, params) < 1e-4


def test_gaussian_logpdf_values():
    tape = dc.Tape()
    assert dc.gaussian_logpdf(tape.var(1.3), 1.3, 1.0).value[0, 0] == pytest.approx(
        -0.9189385332, abs=1e-9)
    sigma = 0.37
    v = dc.gaussian_logpdf(tape.var(2.0 + sigma), 2.0, sigma).value[0, 0]
    assert v == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(sigma) - 0.5, abs=1e-12)
    # direct formula evaluation at y = 2, mu = 0, sigma = 0.5
    direct = -0.5 * math.log(2 * math.pi) - math.log(0.5) - (2.0 ** 2) / (2 * 0.25)
    assert dc.gaussian_logpdf(tape.var(2.0), 0.0, 0.5).value[0, 0] == pytest.approx(direct,
                                                                                  abs=1e-12)


def test_gaussian_logpdf_domain():
    tape = dc.Tape()
    with pytest.raises(DomainError):
        dc.gaussian_logpdf(tape.var(0.0), 0.0, 0.0)


def test_reparam_zero_sigma_returns_mu_exactly():
    tape = dc.Tape()
    mu = tape.var([[0.1234567891234, -7.5]])
    out = dc.reparam_sample(mu, tape.var([[0.0, 0.0]]), np.random.default_rng(0))
    assert out.value.tobytes() == mu.value.tobytes()


def test_reparam_deterministic_under_seed():
    draws = []
    for _ in range(2):
        tape = dc.Tape()
        draws.append(dc.reparam_sample(tape.var(1.0), tape.var(2.0),
                                       np.random.default_rng(42)).value[0, 0])
    assert draws[0] == draws[1]


def test_reparam_moments():
    tape = dc.Tape()
    out = dc.reparam_sample(tape.var(np.ones((1, 100_000))), tape.var(2.0),
                            np.random.default_rng(7)).value
    assert abs(out.mean() - 1.0) < 0.02
    assert abs(out.std() - 2.0) < 0.02


def test_reparam_gradient_flows_through_mu_and_sigma():
    tape = dc.Tape()
    mu, sigma = tape.var(0.5), tape.var(1.5)
    rng = np.random.default_rng(1)
    out = dc.reparam_sample(mu, sigma, rng)
    eps = (out.value[0, 0] - 0.5) / 1.5
    tape.backward(out)
    assert mu.grad[0, 0] == 1.0
    assert sigma.grad[0, 0] == pytest.approx(eps)


def test_reparam_negative_sigma():
    tape = dc.Tape()
    with pytest.raises(DomainError):
        dc.reparam_sample(tape.var(0.0), tape.var(-1.0), np.random.default_rng(0))


def test_dropout_identity_cases():
    tape = dc.Tape()
    m = tape.var(np.random.default_rng(0).normal(size=(4, 5)))
    rng = np.random.default_rng(1)
    assert dc.dropout(m, 0.0, True, rng).value.tobytes() == m.value.tobytes()
    assert dc.dropout(m, 0.3, False, rng).value.tobytes() == m.value.tobytes()


def test_dropout_preserves_expectation():
    tape = dc.Tape()
    out = dc.dropout(tape.var(np.ones((1, 100_000))), 0.3, True, np.random.default_rng(5))
    assert abs(out.value.mean() - 1.0) < 0.02
    kept = out.value[out.value != 0]
    np.testing.assert_allclose(kept, 1 / 0.7)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_domain(rate):
    tape = dc.Tape()
    with pytest.raises(DomainError):
        dc.dropout(tape.var(1.0), rate, True, np.random.default_rng(0))


def test_adam_zero_gradient_on_fresh_state():
    p = np.array([[1.0, -2.0]])
    state = dc.AdamState.zeros_like(p)
    new, state = dc.adam_step(p, np.zeros_like(p), state)
    assert new.tobytes() == p.tobytes()
    assert state.t == 1


def test_adam_first_step_magnitude():
    p = np.array([[0.0]])
    g = 3.7
    new, _ = dc.adam_step(p, np.array([[g]]), dc.AdamState.zeros_like(p))
    # bias-corrected first step: lr * |g| / (|g| + eps)
    assert abs(new[0, 0]) == pytest.approx(0.001 * g / (g + 1e-8), rel=1e-12)
    assert abs(new[0, 0]) == pytest.approx(0.001, rel=1e-6)


def test_adam_converges_on_quadratic():
    w = np.array([[0.0]])
    state = dc.AdamState.zeros_like(w, lr=0.1)
    for _ in range(200):
        w, state = dc.adam_step(w, 2 * (w - 5.0), state)
    assert abs(w[0, 0] - 5.0) < 0.5
    assert state.t == 200


def test_adam_shape_mismatch():
    p = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        dc.adam_step(p, np.zeros((2, 1)), dc.AdamState.zeros_like(p))


def test_mixing_tapes_is_rejected():
    a, b = dc.Tape().var(1.0), dc.Tape().var(2.0)
    with pytest.raises(ContractError):
        dc.add(a, b)


# ----------------------------------------------------------- properties

OPS = {
    "matmul": (lambda P: dc.matmul(P["a"], P["b"]), {"a": (3, 4), "b": (4, 2)}),
    "add_broadcast": (lambda P: P["a"] + P["b"], {"a": (3, 4), "b": (1, 4)}),
    "sub": (lambda P: P["a"] - P["b"], {"a": (3, 2), "b": (3, 2)}),
    "mul_broadcast": (lambda P: dc.mul(P["a"], P["b"]), {"a": (3, 4), "b": (3, 1)}),
    "sigmoid": (lambda P: dc.sigmoid(P["a"]), {"a": (2, 3)}),
    "tanh": (lambda P: dc.tanh(P["a"]), {"a": (2, 3)}),
    "softplus": (lambda P: dc.softplus(P["a"]), {"a": (2, 3)}),
    "relu": (lambda P: dc.relu(P["a"]), {"a": (2, 3)}),
    "square": (lambda P: dc.square(P["a"]), {"a": (2, 3)}),
    "concat_rows": (lambda P: dc.rows(dc.concat([P["a"], P["b"]], axis=0), 1, 4),
                    {"a": (2, 3), "b": (3, 3)}),
    "columns": (lambda P: dc.columns(dc.concat([P["a"], P["b"]]), 1, 4),
                {"a": (2, 3), "b": (2, 2)}),
    "logpdf": (lambda P: dc.gaussian_logpdf(P["a"], P["b"], dc.softplus(P["c"])),
               {"a": (2, 3), "b": (2, 3), "c": (2, 3)}),
    "gru_cell": (lambda P: dc.gru_cell(P["x"], P["h"], P["wz"], P["uz"], P["bz"], P["wr"],
                                       P["ur"], P["br"], P["wn"], P["un"], P["bn"]),
                 {"x": (3, 2), "h": (3, 4), "wz": (2, 4), "uz": (4, 4), "bz": (1, 4),
                  "wr": (2, 4), "ur": (4, 4), "br": (1, 4), "wn": (2, 4), "un": (4, 4),
                  "bn": (1, 4)}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_on_random_instances(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = {}
    for instance in range(100):
        params = {k: rng.normal(size=s) for k, s in shapes.items()}
        if name == "relu":
            # keep clear of the kink so central differences are valid
            params["a"] = np.sign(params["a"]) * (np.abs(params["a"]) + 1e-3)
        key = tuple(shapes)
        weights.setdefault(key, rng.normal(size=_out_shape(fn, params)))
        w = weights[key]

        def loss(tape, P):
            return dc.total(dc.mul(fn(P), w))

        assert finite_difference_check(loss, params) < 1e-4, instance


def _out_shape(fn, params):
    tape = dc.Tape()
    return fn({k: tape.var(v) for k, v in params.items()}).value.shape


@settings(max_examples=300, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_softplus_strictly_positive(x):
    assert dc.softplus_np(np.array([x]))[0] > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=50), st.integers(0, 2**32 - 1))
def test_adam_zero_gradients_never_move_parameters(steps, seed):
    p = np.random.default_rng(seed).normal(size=(3, 2))
    state = dc.AdamState.zeros_like(p)
    q = p
    for _ in range(steps):
        q, state = dc.adam_step(q, np.zeros_like(q), state)
    assert q.tobytes() == p.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.99))
def test_dropout_eval_is_bit_exact_identity(seed, rate):
    tape = dc.Tape()
    m = tape.var(np.random.default_rng(seed).normal(size=(4, 3)))
    assert dc.dropout(m, rate, False, None).value.tobytes() == m.value.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(0, 1000))
def test_reparam_zero_sigma_bit_exact(mu, seed):
    tape = dc.Tape()
    out = dc.reparam_sample(tape.var(mu), tape.var(0.0), np.random.default_rng(seed))
    assert out.value[0, 0] == mu
