"""Feature scaling fit on low-fidelity training data and reused everywhere.

Series are z-scored per time step; parameter vectors map to [-1, 1]
through their prior bounds.  Both transforms must be inverted exactly
when predictions leave the model, so the fitted statistics are stored
and serialized verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError

STD_FLOOR = 1e-8


@dataclass
class Standardizer:
    y_mean: np.ndarray
    y_std: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray

    def __post_init__(self):
        self.y_mean = np.asarray(self.y_mean, dtype=np.float64)
        self.y_std = np.asarray(self.y_std, dtype=np.float64)
        self.theta_lo = np.asarray(self.theta_lo, dtype=np.float64)
        self.theta_hi = np.asarray(self.theta_hi, dtype=np.float64)
        if self.y_mean.shape != self.y_std.shape or self.y_mean.ndim != 1:
            raise ShapeError("y_mean and y_std must be matching vectors")
        if np.any(self.y_std < STD_FLOOR):
            raise ValueError(f"y_std entries must be at least {STD_FLOOR}")
        if self.theta_lo.shape != self.theta_hi.shape or self.theta_lo.ndim != 1:
            raise ShapeError("theta bounds must be matching vectors")
        if np.any(self.theta_hi <= self.theta_lo):
            raise ValueError("theta_hi must exceed theta_lo elementwise")

    @property
    def series_len(self) -> int:
        return self.y_mean.size

    @property
    def n_params(self) -> int:
        return self.theta_lo.size

    def _check_width(self, arr, width, what):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[-1] != width:
            raise ShapeError(f"{what} must have {width} columns, got {arr.shape[-1]}", tensor=what)
        return arr

    def transform_y(self, y):
        y = self._check_width(y, self.series_len, "y")
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y_std):
        y_std = self._check_width(y_std, self.series_len, "y")
        return y_std * self.y_std + self.y_mean

    def transform_theta(self, theta):
        theta = self._check_width(theta, self.n_params, "theta")
        return 2.0 * (theta - self.theta_lo) / (self.theta_hi - self.theta_lo) - 1.0

    def inverse_theta(self, t):
        t = self._check_width(t, self.n_params, "theta")
        return (t + 1.0) / 2.0 * (self.theta_hi - self.theta_lo) + self.theta_lo

    def to_dict(self) -> dict:
        return {
            "y_mean": self.y_mean.tolist(),
            "y_std": self.y_std.tolist(),
            "theta_lo": self.theta_lo.tolist(),
            "theta_hi": self.theta_hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            y_mean=np.asarray(d["y_mean"]),
            y_std=np.asarray(d["y_std"]),
            theta_lo=np.asarray(d["theta_lo"]),
            theta_hi=np.asarray(d["theta_hi"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Standardizer":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_standardizer(theta, y, theta_lo, theta_hi, idx=None) -> Standardizer:
    """Fit per-time-step statistics on ``y`` rows (optionally a subset).

    ``theta`` is unused beyond a row-count check; the parameter transform
    comes from the prior bounds, not from data.
    """
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if theta.shape[0] != y.shape[0]:
        raise ShapeError(f"{theta.shape[0]} parameter rows but {y.shape[0]} series rows")
    if idx is not None:
        y = y[np.asarray(idx)]
    if y.shape[0] == 0:
        raise ValueError("cannot fit a standardizer on zero rows")
    mean = y.mean(axis=0)
    std = np.maximum(y.std(axis=0), STD_FLOOR)
    return Standardizer(y_mean=mean, y_std=std, theta_lo=theta_lo, theta_hi=theta_hi)
