"""Prediction errors, Welch t-test, Granger verdicts and the linear VAR baseline."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import model as M
from .exceptions import ConfigError, DegenerateError, DomainError, ShapeError, SingularDesignError

ALPHA = 0.05
N_SAMPLES = 50

_CF_TOL = 1e-12
_CF_MAX_ITER = 200
_TINY = 1e-300


# ----------------------------------------------------------- special functions

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            break
    return h


def betainc(a: float, b: float, x: float, y: float | None = None) -> float:
    """Regularized incomplete beta ``I_x(a, b)``.

    ``y`` may carry ``1 - x`` computed without cancellation by the caller.
    """
    if a <= 0 or b <= 0:
        raise DomainError(f"betainc needs a, b > 0, got {a}, {b}")
    y = 1.0 - x if y is None else y
    if x < 0 or y < 0:
        raise DomainError(f"betainc needs 0 <= x <= 1, got {x}")
    if x == 0:
        return 0.0
    if y == 0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def student_t_tail(t: float, df: float) -> float:
    """Upper tail ``P(T > |t|)``."""
    if not df > 0:
        raise DomainError(f"degrees of freedom must be > 0, got {df}")
    if t == 0:
        return 0.5
    t2 = t * t
    return 0.5 * betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def student_t_cdf(t: float, df: float) -> float:
    """``P(T <= t)`` for Student's t with ``df`` degrees of freedom."""
    tail = student_t_tail(t, df)
    if t > 0:
        return 1.0 - tail
    return tail


def f_sf(f: float, d1: float, d2: float) -> float:
    """Survival function ``P(F > f)`` of the F distribution."""
    if d1 <= 0 or d2 <= 0:
        raise DomainError("F degrees of freedom must be positive")
    if f <= 0:
        return 1.0
    denom = d2 + d1 * f
    return betainc(d2 / 2.0, d1 / 2.0, d2 / denom, d1 * f / denom)


# ----------------------------------------------------------------------- MSE

def mse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.size == 0:
        raise ShapeError(f"mse needs equal nonempty shapes, got {pred.shape} and {actual.shape}")
    d = actual - pred
    return float(np.mean(d * d))


# ------------------------------------------------------------------- t-test

@dataclass
class TTestResult:
    t_stat: float
    df: float
    p_one_sided: float
    side: str


def welch_ttest(a, b, side: str = "greater") -> TTestResult:
    """One-sided Welch test; ``side="greater"`` tests ``mean(a) > mean(b)``."""
    if side not in ("greater", "less"):
        raise ValueError(f"side must be 'greater' or 'less', got {side!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ConfigError("welch_ttest needs at least two observations per sample")
    va = a.var(ddof=1) / na
    vb = b.var(ddof=1) / nb
    se2 = va + vb
    if not se2 > 0:
        raise DegenerateError("both samples are constant; the t statistic is undefined")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (na - 1) + vb * vb / (nb - 1))
    p = student_t_cdf(-t if side == "greater" else t, df)
    return TTestResult(float(t), float(df), float(p), side)


# ------------------------------------------------------------ error sampling

@dataclass
class ErrorSamples:
    restricted: np.ndarray
    full: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.restricted = np.asarray(self.restricted, dtype=np.float64)
        self.full = np.asarray(self.full, dtype=np.float64)
        if self.restricted.shape != self.full.shape or len(self.full) < 2:
            raise ConfigError("error samples must be paired vectors of length >= 2")
        both = np.concatenate([self.restricted, self.full])
        if not np.all(np.isfinite(both)) or np.any(both < 0):
            raise ConfigError("error samples must be finite and non-negative")

    @property
    def n(self) -> int:
        return len(self.full)


def sample_prediction_errors(params: M.ModelParams, test, n: int = N_SAMPLES, rng=None,
                             deterministic_latent: bool = False, yres_from_mean: bool = False,
                             provenance: dict | None = None) -> ErrorSamples:
    """``n`` stochastic passes over the test windows, one MSE pair per pass.

    Dropout is off; the latent and the restricted draw fed to the full head
    are resampled every pass. Predictions are the head means at the last
    step of each window, scored against the window's next-step target.
    """
    if len(test) == 0:
        raise ConfigError("test split has no windows")
    rng = np.random.default_rng(0) if rng is None else rng
    opts = M.ForwardOptions(train=False, dropout=0.0,
                            deterministic_latent=deterministic_latent,
                            yres_from_mean=yres_from_mean)
    target = test.next_target
    restricted, full = np.empty(n), np.empty(n)
    for i in range(n):
        pred = M.forward(params, test, dc.Tape(), rng, opts)
        restricted[i] = mse(pred.last(pred.mu_r), target)
        full[i] = mse(pred.last(pred.mu_f), target)
    return ErrorSamples(restricted, full, dict(provenance or {}))


# ------------------------------------------------------------------- verdict

@dataclass
class GrangerReport:
    verdict: str
    alternative: str
    ttest: TTestResult
    mean_restricted: float
    std_restricted: float
    mean_full: float
    std_full: float
    alpha: float = ALPHA
    n: int = N_SAMPLES
    test: str = "welch, one-sided"
    provenance: dict = field(default_factory=dict)

    @property
    def p_value(self) -> float:
        return self.ttest.p_one_sided

    @property
    def is_granger(self) -> bool:
        return self.verdict == "granger"

    def to_dict(self) -> dict:
        return {
            "dataset": self.provenance.get("dataset"),
            "verdict": self.verdict,
            "alternative": self.alternative,
            "test": self.test,
            "t": self.ttest.t_stat,
            "df": self.ttest.df,
            "p": self.ttest.p_one_sided,
            "mean_restricted": self.mean_restricted,
            "std_restricted": self.std_restricted,
            "mean_full": self.mean_full,
            "std_full": self.std_full,
            "n": self.n,
            "alpha": self.alpha,
            "seed": self.provenance.get("seed"),
            "checkpoint_id": self.provenance.get("checkpoint_id"),
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def decide_granger(errors: ErrorSamples, alpha: float = ALPHA) -> GrangerReport:
    """Pick the alternative from the sample means, then test it.

    ``mean(full) < mean(restricted)`` tests H1: full error is smaller (the
    Granger direction); otherwise, ties included, H1: full error is larger.
    """
    full_less = errors.full.mean() < errors.restricted.mean()
    side = "less" if full_less else "greater"
    res = welch_ttest(errors.full, errors.restricted, side)
    res.side = "full_less" if full_less else "full_greater"
    verdict = "granger" if full_less and res.p_one_sided < alpha else "not_granger"
    return GrangerReport(
        verdict=verdict,
        alternative="full < restricted" if full_less else "full > restricted",
        ttest=res,
        mean_restricted=float(errors.restricted.mean()),
        std_restricted=float(errors.restricted.std(ddof=1)),
        mean_full=float(errors.full.mean()),
        std_full=float(errors.full.std(ddof=1)),
        alpha=alpha, n=errors.n, provenance=dict(errors.provenance),
    )


# -------------------------------------------------------------- VAR baseline

@dataclass
class VarBaselineFit:
    lag: int
    coefs: np.ndarray  # (L, 2, 2); row/col order (x, y)
    rss_restricted: float
    rss_full: float
    f_stat: float
    df_num: int
    df_den: int
    p_value: float
    alpha: float = ALPHA

    @property
    def verdict(self) -> str:
        return "granger" if self.p_value < self.alpha else "not_granger"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coefs"] = self.coefs.tolist()
        d["verdict"] = self.verdict
        return d


def _lag_block(v: np.ndarray, L: int) -> np.ndarray:
    T = len(v)
    return np.column_stack([v[L - l:T - l] for l in range(1, L + 1)])


def _ols(design: np.ndarray, target: np.ndarray):
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesignError(f"design matrix with {design.shape[1]} columns is rank "
                                  f"deficient")
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return coef, float(resid @ resid)


def var_granger_baseline(x, y, L: int = 5, alpha: float = ALPHA) -> VarBaselineFit:
    """F-test of whether lags of ``x`` improve a linear autoregression of ``y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    if L < 1:
        raise ConfigError("lag order must be >= 1")
    T = len(y)
    if T <= 2 * L + 2:
        raise ConfigError(f"need T > 2L + 2 observations, got T={T}, L={L}")
    n_obs = T - L
    ones = np.ones((n_obs, 1))
    ylags, xlags = _lag_block(y, L), _lag_block(x, L)
    restricted = np.hstack([ones, ylags])
    full = np.hstack([ones, ylags, xlags])
    _, rss_r = _ols(restricted, y[L:])
    coef_y, rss_f = _ols(full, y[L:])
    coef_x, _ = _ols(full, x[L:])
    df_den = n_obs - 2 * L - 1
    f_stat = ((rss_r - rss_f) / L) / (rss_f / df_den)
    coefs = np.empty((L, 2, 2))
    for l in range(L):
        coefs[l, 0] = coef_x[1 + L + l], coef_x[1 + l]
        coefs[l, 1] = coef_y[1 + L + l], coef_y[1 + l]
    return VarBaselineFit(L, coefs, rss_r, rss_f, float(f_stat), L, df_den,
                          f_sf(max(f_stat, 0.0), L, df_den), alpha)
