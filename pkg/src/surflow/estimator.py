"""Scikit-learn style estimator wrapping the flow surrogate.

``FlowSurrogate`` maps parameter vectors to probabilistic time-series
predictions.  ``warm_start=True`` turns a second ``fit`` call into a
fine-tuning pass that reuses the first call's standardizer and
parameters, which is the intended low- to high-fidelity workflow:

    est.fit(theta_lf, y_lf)
    est.set_params(warm_start=True, epochs=300, lr=3e-4)
    est.fit(theta_hf, y_hf)
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .model import build_default_model, flow_sample
from .seeding import derive_seed
from .standardize import fit_standardizer
from .training import TrainConfig, _fit, match_dispersion, mean_nll


def _check_theta_y(X, y):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    return X, y


class FlowSurrogate(BaseEstimator):
    """Conditional flow surrogate with a fit/predict interface.

    Parameters mirror the underlying builder and trainer.  ``theta_bounds``
    fixes the conditioning-scale range as ``(lo, hi)`` arrays; when omitted
    the bounds are taken from the training data (columns with zero range
    are widened symmetrically).
    """

    def __init__(
        self,
        latent_dim=10,
        hidden=(64, 64),
        n_pre=4,
        n_post=2,
        clamp=2.0,
        epochs=200,
        batch_size=32,
        lr=1e-3,
        val_fraction=0.1,
        shuffle=True,
        grad_clip=None,
        early_stop_patience=None,
        theta_bounds=None,
        n_samples=1000,
        alpha=0.95,
        warm_start=False,
        seed=0,
    ):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.n_pre = n_pre
        self.n_post = n_post
        self.clamp = clamp
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.shuffle = shuffle
        self.grad_clip = grad_clip
        self.early_stop_patience = early_stop_patience
        self.theta_bounds = theta_bounds
        self.n_samples = n_samples
        self.alpha = alpha
        self.warm_start = warm_start
        self.seed = seed

    # -- fitting -----------------------------------------------------------

    def _bounds(self, X):
        if self.theta_bounds is not None:
            lo = np.asarray(self.theta_bounds[0], dtype=np.float64)
            hi = np.asarray(self.theta_bounds[1], dtype=np.float64)
        else:
            lo, hi = X.min(axis=0), X.max(axis=0)
        lo = np.broadcast_to(lo, (X.shape[1],)).copy()
        hi = np.broadcast_to(hi, (X.shape[1],)).copy()
        flat = hi <= lo
        lo[flat] -= 0.5
        hi[flat] += 0.5
        return lo, hi

    def _split(self, n):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.val_fraction == 0.0 or n < 2:
            return n
        return n - max(1, round(self.val_fraction * n))

    def fit(self, X, y):
        """Fit the flow to (parameters, series) pairs.

        With ``warm_start=True`` and a previous fit, training continues
        from the stored parameters and keeps the stored standardizer.
        """
        X, y = _check_theta_y(X, y)
        warm = self.warm_start and hasattr(self, "model_")
        if warm:
            if X.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"warm start expects {self.n_features_in_} features, got {X.shape[1]}"
                )
            if y.shape[1] != self.standardizer_.series_len:
                raise ValueError(
                    f"warm start expects series length {self.standardizer_.series_len},"
                    f" got {y.shape[1]}"
                )
        else:
            self.n_features_in_ = X.shape[1]
            lo, hi = self._bounds(X)
            self.standardizer_ = fit_standardizer(X, y, lo, hi)
            self.model_ = build_default_model(
                data_dim=y.shape[1],
                latent_dim=self.latent_dim,
                cond_dim=X.shape[1],
                seed=derive_seed(self.seed, "init"),
                hidden=tuple(self.hidden),
                clamp=self.clamp,
                n_pre=self.n_pre,
                n_post=self.n_post,
            )
        th = self.standardizer_.transform_theta(X)
        ys = self.standardizer_.transform_y(y)
        cut = self._split(len(ys))
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=derive_seed(self.seed, "finetune" if warm else "train"),
            shuffle=self.shuffle,
            grad_clip=self.grad_clip,
            early_stop_patience=self.early_stop_patience,
        )
        snap, report = _fit(self.model_, th[:cut], ys[:cut], th[cut:], ys[cut:], cfg)
        self.model_.params.restore(snap)
        self.report_ = report
        return self

    # -- prediction --------------------------------------------------------

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _draws(self, X, n_samples):
        th = self.standardizer_.transform_theta(X)
        out = np.empty((X.shape[0], n_samples, self.standardizer_.series_len))
        for i in range(X.shape[0]):
            rng = np.random.default_rng(derive_seed(self.seed, f"predict:{i}"))
            out[i] = self.standardizer_.inverse_y(flow_sample(self.model_, th[i], n_samples, rng))
        return out

    def predict(self, X, return_std=False):
        """Predictive mean per row; optionally the pointwise spread too."""
        X = self._check_X(X)
        draws = self._draws(X, self.n_samples)
        mean = draws.mean(axis=1)
        if return_std:
            return mean, draws.std(axis=1)
        return mean

    def predict_interval(self, X, alpha=None):
        """Central credible band per row: (lo, hi), each (n, series_len)."""
        X = self._check_X(X)
        alpha = self.alpha if alpha is None else alpha
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        draws = self._draws(X, self.n_samples)
        lo, hi = np.quantile(draws, [(1 - alpha) / 2, (1 + alpha) / 2], axis=1)
        return lo, hi

    def sample(self, X, n_samples=None):
        """Raw predictive draws, shape (n_rows, n_samples, series_len)."""
        X = self._check_X(X)
        return self._draws(X, self.n_samples if n_samples is None else n_samples)

    def score(self, X, y):
        """Mean log-likelihood of ``y`` (standardized space; higher is better)."""
        X, y = _check_theta_y(X, y)
        X = self._check_X(X)
        th = self.standardizer_.transform_theta(X)
        ys = self.standardizer_.transform_y(y)
        return -mean_nll(self.model_, th, ys)
