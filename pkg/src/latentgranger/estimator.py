"""scikit-learn style wrappers around the training and testing functions."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from . import datagen, model as M, stats, training
from . import diffcore as dc


def _as_bundle(X, y=None, proxies=None) -> datagen.SeriesBundle:
    if isinstance(X, datagen.SeriesBundle):
        return X
    if y is None or proxies is None:
        raise ValueError("pass a SeriesBundle, or X (cause), y (effect) and proxies")
    x = check_array(np.asarray(X).reshape(len(X), -1), ensure_min_samples=2).ravel()
    yv = check_array(np.asarray(y).reshape(len(y), -1), ensure_min_samples=2).ravel()
    u = check_array(np.asarray(proxies).reshape(len(proxies), -1), ensure_min_samples=2)
    check_consistent_length(x, yv, u)
    return datagen.SeriesBundle(x=x, y=yv, u=u.T)


class BundleStandardizer(TransformerMixin, BaseEstimator):
    """Z-scores every observed channel using statistics from one split."""

    def __init__(self, stats_from="train", fractions=(0.8, 0.1, 0.1)):
        self.stats_from = stats_from
        self.fractions = fractions

    def fit(self, bundle, y=None):
        _, self.stats_ = datagen.standardize(bundle, self.stats_from, self.fractions)
        return self

    def transform(self, bundle):
        check_is_fitted(self, "stats_")
        s = self.stats_
        u = np.vstack([(bundle.u[k] - s.mean[f"u{k + 1}"]) / s.std[f"u{k + 1}"]
                       for k in range(bundle.n_proxies)])
        return datagen.SeriesBundle((bundle.x - s.mean["x"]) / s.std["x"],
                                    (bundle.y - s.mean["y"]) / s.std["y"], u,
                                    bundle.z_true, dict(bundle.meta))

    def inverse_transform(self, bundle):
        check_is_fitted(self, "stats_")
        return datagen.invert_standardize(bundle, self.stats_)


class DualDecoderGrangerTest(BaseEstimator):
    """Nonlinear Granger test of X -> Y with a learned substitute confounder.

    ``fit`` trains on the first two chronological splits; ``test`` draws
    prediction-error samples on the held-out split and returns a
    :class:`~latentgranger.stats.GrangerReport`.

    Example::

        est = DualDecoderGrangerTest(random_state=0).fit(x, y, proxies=u)
        est.test().verdict
    """

    def __init__(self, seq_len=20, batch_size=10, lr=0.001, max_epochs=300, patience=20,
                 hidden=5, mlp_hidden=5, d_z=1, dropout=0.3, mc_samples=1,
                 stop_yres_grad=True, yres_from_mean=False, standardize=True,
                 fractions=(0.8, 0.1, 0.1), n_error_samples=50, alpha=0.05,
                 random_state=0):
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.hidden = hidden
        self.mlp_hidden = mlp_hidden
        self.d_z = d_z
        self.dropout = dropout
        self.mc_samples = mc_samples
        self.stop_yres_grad = stop_yres_grad
        self.yres_from_mean = yres_from_mean
        self.standardize = standardize
        self.fractions = fractions
        self.n_error_samples = n_error_samples
        self.alpha = alpha
        self.random_state = random_state

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            lr=self.lr, batch_size=self.batch_size, seq_len=self.seq_len,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.random_state,
            mc_samples=self.mc_samples, dropout=self.dropout, hidden=self.hidden,
            mlp_hidden=self.mlp_hidden, d_z=self.d_z, stop_yres_grad=self.stop_yres_grad,
            yres_from_mean=self.yres_from_mean, fractions=tuple(self.fractions))

    def fit(self, X, y=None, proxies=None):
        bundle = _as_bundle(X, y, proxies)
        if self.standardize:
            self.scaler_ = BundleStandardizer("train", self.fractions).fit(bundle)
            bundle = self.scaler_.transform(bundle)
        else:
            self.scaler_ = None
        cfg = self.train_config()
        result = training.train(bundle, cfg)
        self.params_ = result.params
        self.history_ = result.history
        self.windows_ = result.windows
        self.optimizer_ = result.optimizer
        return self

    def sample_errors(self, n=None, random_state=None):
        check_is_fitted(self, "params_")
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        return stats.sample_prediction_errors(
            self.params_, self.windows_.test, n or self.n_error_samples, rng,
            yres_from_mean=self.yres_from_mean, provenance={"seed": seed})

    def test(self, n=None, random_state=None) -> stats.GrangerReport:
        self.errors_ = self.sample_errors(n, random_state)
        self.report_ = stats.decide_granger(self.errors_, self.alpha)
        return self.report_

    def predict(self, X, y=None, proxies=None, head="full"):
        """Next-step mean predictions of Y after every complete window.

        Predictions are returned in the units of ``y``. Latent and restricted
        draws are replaced by their means.
        """
        check_is_fitted(self, "params_")
        if head not in ("full", "restricted"):
            raise ValueError("head must be 'full' or 'restricted'")
        bundle = _as_bundle(X, y, proxies)
        if self.scaler_ is not None:
            bundle = self.scaler_.transform(bundle)
        tau = self.seq_len
        if bundle.T < tau:
            raise ValueError(f"series shorter than the sequence length {tau}")
        starts = np.arange(bundle.T - tau + 1)
        idx = starts[:, None] + np.arange(tau)[None, :]
        w = datagen.Windows(bundle.x[idx], bundle.y[idx],
                            np.transpose(bundle.u[:, idx], (1, 2, 0)),
                            np.zeros_like(idx, dtype=np.float64), starts)
        opts = M.ForwardOptions(dropout=0.0, deterministic_latent=True)
        pred = M.forward(self.params_, w, dc.Tape(), np.random.default_rng(0), opts)
        out = pred.last(pred.mu_f if head == "full" else pred.mu_r)
        if self.scaler_ is not None:
            s = self.scaler_.stats_
            out = out * s.std["y"] + s.mean["y"]
        return out


class VarGrangerTest(BaseEstimator):
    """Linear bivariate F-test of X -> Y with ``lag`` lags of each series."""

    def __init__(self, lag=5, alpha=0.05):
        self.lag = lag
        self.alpha = alpha

    def fit(self, X, y):
        x = check_array(np.asarray(X).reshape(len(X), -1), ensure_min_samples=2).ravel()
        yv = check_array(np.asarray(y).reshape(len(y), -1), ensure_min_samples=2).ravel()
        check_consistent_length(x, yv)
        self.fit_ = stats.var_granger_baseline(x, yv, self.lag, self.alpha)
        self.p_value_ = self.fit_.p_value
        self.verdict_ = self.fit_.verdict
        return self


__all__ = ["BundleStandardizer", "DualDecoderGrangerTest", "VarGrangerTest", "NotFittedError"]
