import numpy as np

from latentgranger import diffcore as dc


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(loss_fn, params: dict, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn(tape, P)`` builds a scalar node from tape variables ``P``.
    Entries below 1e-6 in magnitude are effectively compared at 1e-10 absolute.
    """
    tape = dc.Tape()
    P = {k: tape.var(v) for k, v in params.items()}
    tape.backward(loss_fn(tape, P))
    worst = 0.0
    for name, value in params.items():
        analytic = P[name].grad
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up = _eval(loss_fn, params)
            value[idx] = old - h
            down = _eval(loss_fn, params)
            value[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(fd, analytic[idx])))
    return worst


def _eval(loss_fn, params):
    tape = dc.Tape()
    return float(loss_fn(tape, {k: tape.var(v) for k, v in params.items()}).value[0, 0])
