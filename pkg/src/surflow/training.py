"""Two-stage maximum-likelihood training for conditional flows.

``pretrain_lf`` fits on abundant low-fidelity pairs, ``finetune_hf``
warm-starts from that solution on scarce high-fidelity pairs, and
``train_hf_only`` is the from-scratch baseline.  All three share one
minibatch Adam loop over the negative mean log-likelihood; the returned
parameter snapshot is the best-validation epoch, with the initial
parameters included as a candidate so fine-tuning can never end worse
than it started on validation data.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParamStore, ShapeError, Tape, backward
from .layers import FunnelLayer, NonFiniteError
from .model import FlowModel, flow_loglik, flow_sample
from .optim import AdamState, adam_step, clip_global_norm
from .seeding import derive_seed
from .standardize import Standardizer, fit_standardizer

EVAL_CHUNK = 256


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; message carries epoch/batch."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    shuffle: bool = True
    grad_clip: float | None = None
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1 when set")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "shuffle": self.shuffle,
            "grad_clip": self.grad_clip,
            "early_stop_patience": self.early_stop_patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    """Per-epoch mean NLL curves plus wall-clock seconds.

    ``best_epoch`` is -1 when the initial parameters won (or no epochs ran).
    """

    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.train_nll)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_nll", "val_nll", "seconds", "is_best"])
            for i, (tr, va, sec) in enumerate(zip(self.train_nll, self.val_nll, self.seconds)):
                writer.writerow([i, f"{tr:.17g}", f"{va:.17g}", f"{sec:.6f}", int(i == self.best_epoch)])


def mean_nll(model: FlowModel, theta_std: np.ndarray, y_std: np.ndarray) -> float:
    """Mean per-sample negative log-likelihood on standardized arrays."""
    if len(y_std) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(y_std), EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        node = flow_loglik(model, y_std[sl], theta_std[sl], Tape())
        total += float(-node.value.sum())
    return total / len(y_std)


def _guarded_nll(model, th, y, where: str) -> float:
    try:
        return mean_nll(model, th, y)
    except NonFiniteError as err:
        raise TrainingDiverged(f"{where}: {err}") from err


def _fit(model: FlowModel, th_tr, y_tr, th_val, y_val, cfg: TrainConfig):
    """Shared Adam loop.  Returns (best parameter snapshot, TrainReport)."""
    params = model.params
    opt = AdamState.for_store(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    has_val = len(y_val) > 0
    best = params.snapshot()
    best_val = _guarded_nll(model, th_val, y_val, "initial validation") if has_val else np.inf
    report = TrainReport()
    n = len(y_tr)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            tape = Tape()
            try:
                ll = flow_loglik(model, y_tr[batch], th_tr[batch], tape)
            except NonFiniteError as err:
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: {err}") from err
            loss = tape.mean_all(tape.neg(ll))
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: non-finite loss")
            params.zero_grads()
            backward(tape, 1.0, root=loss)
            if cfg.grad_clip is not None:
                clip_global_norm(params.grads, cfg.grad_clip)
            adam_step(opt, params)
            loss_sum += value * len(batch)
        report.train_nll.append(loss_sum / n)
        if has_val:
            val = _guarded_nll(model, th_val, y_val, f"validation after epoch {epoch}")
            if val < best_val:
                best_val = val
                best = params.snapshot()
                report.best_epoch = epoch
        else:
            val = float("nan")
        report.val_nll.append(val)
        report.seconds.append(time.perf_counter() - t0)
        if (
            cfg.early_stop_patience is not None
            and has_val
            and epoch - report.best_epoch >= cfg.early_stop_patience
        ):
            break
    if not has_val and cfg.epochs > 0:
        best = params.snapshot()
        report.best_epoch = report.epochs_run - 1
    return best, report


def _standardized(standardizer: Standardizer, theta, y):
    return standardizer.transform_theta(theta), standardizer.transform_y(y)


def pretrain_lf(model: FlowModel, lf, cfg: TrainConfig, standardizer: Standardizer, n_val: int = 20):
    """Maximum-likelihood pretraining on a low-fidelity dataset.

    The last ``n_val`` records are the validation split (the same rows
    the standardizer fit excluded).  Returns (snapshot, report); the
    model is left at its current (final-epoch) parameters, so restore
    the snapshot before using it.
    """
    n = lf.n_records
    if not 0 <= n_val < n:
        raise ValueError(f"n_val must lie in [0, {n}), got {n_val}")
    th, y = _standardized(standardizer, lf.theta, lf.y)
    cut = n - n_val
    return _fit(model, th[:cut], y[:cut], th[cut:], y[cut:], cfg)


def match_dispersion(
    model: FlowModel,
    theta_std: np.ndarray,
    y_std: np.ndarray,
    rng: np.random.Generator,
    n_draws: int = 128,
    max_widen: float = 5.0,
) -> float:
    """Widen the funnel decoder spreads to the current residual level.

    A warm-started model carries the noise level of its pretraining
    data, which is usually far tighter than its actual residuals on the
    new rows.  Optimizing from there makes the early likelihood reward
    chasing individual records' noise with the conditional mean.  This
    shifts every funnel decoder's log-std output (through its final
    bias) by the pooled log-ratio of residual RMS to predictive-spread
    RMS, measured by Monte Carlo on the given standardized rows.  The
    offset is clipped to [0, ``max_widen``]: spreads are never
    narrowed.  Returns the applied offset.
    """
    if len(y_std) == 0:
        return 0.0
    means = np.empty_like(y_std)
    sds = np.empty_like(y_std)
    for i in range(len(y_std)):
        draws = flow_sample(model, theta_std[i], n_draws, rng)
        means[i] = draws.mean(axis=0)
        sds[i] = draws.std(axis=0)
    resid_rms = float(np.sqrt(np.mean((y_std - means) ** 2)))
    pred_rms = float(np.sqrt(np.mean(sds**2)))
    offset = np.log(max(resid_rms, 1e-12) / max(pred_rms, 1e-12))
    offset = float(np.clip(offset, 0.0, max_widen))
    if offset > 0.0:
        for layer in model.layers:
            if isinstance(layer, FunnelLayer):
                bias_key = f"{layer.decoder.name}.b{len(layer.decoder.layer_dims()) - 1}"
                bias = model.params.get(bias_key)
                bias[len(layer.drop_idx) :] += offset
    return offset


def finetune_hf(
    model: FlowModel,
    phi_init,
    hf,
    cfg: TrainConfig,
    standardizer: Standardizer,
    n_test: int = 20,
    n_use: int | None = None,
    val_fraction: float = 0.1,
):
    """Warm-started fine-tuning on high-fidelity data.

    ``phi_init`` is the pretrained snapshot; with ``cfg.epochs == 0`` it
    is returned unchanged.  The last ``n_test`` records are never
    touched; of the remaining pool the first ``n_use`` rows are used,
    with a trailing ``val_fraction`` carved off for snapshot selection.
    Before the first step the decoder spreads are widened to the warm
    start's residual level on the training rows (:func:`match_dispersion`),
    so the early epochs adapt the conditional mean under an honest noise
    model instead of chasing per-record noise.
    """
    phi_init = np.asarray(phi_init, dtype=np.float64)
    if phi_init.size != model.params.n_params:
        raise ShapeError(
            f"snapshot has {phi_init.size} entries, model has {model.params.n_params}",
            tensor="phi_init",
        )
    model.params.restore(phi_init)
    th_tr, y_tr, th_val, y_val = _finetune_split(hf, standardizer, n_test, n_use, val_fraction)
    if cfg.epochs > 0:
        rng = np.random.default_rng(derive_seed(cfg.seed, "dispersion-match"))
        match_dispersion(model, th_tr, y_tr, rng)
    return _fit(model, th_tr, y_tr, th_val, y_val, cfg)


def train_hf_only(
    model: FlowModel,
    hf,
    cfg: TrainConfig,
    standardizer: Standardizer,
    n_test: int = 20,
    n_use: int | None = None,
    val_fraction: float = 0.1,
):
    """High-fidelity-only baseline: same loop, no warm start.

    The model trains from whatever (fresh) initialization it carries.
    """
    th_tr, y_tr, th_val, y_val = _finetune_split(hf, standardizer, n_test, n_use, val_fraction)
    return _fit(model, th_tr, y_tr, th_val, y_val, cfg)


def holdout_rows(n_use: int, val_fraction: float) -> int:
    """Validation rows carved from an ``n_use`` allocation (at least one
    whenever the fraction is positive and there is a row to spare)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    if val_fraction == 0.0 or n_use < 2:
        return 0
    return max(1, round(val_fraction * n_use))


def _finetune_split(hf, standardizer, n_test, n_use, val_fraction):
    n = hf.n_records
    if not 0 <= n_test < n:
        raise ValueError(f"n_test must lie in [0, {n}), got {n_test}")
    pool = n - n_test
    if n_use is None:
        n_use = pool
    if not 1 <= n_use <= pool:
        raise ValueError(f"n_use must lie in [1, {pool}], got {n_use}")
    th, y = _standardized(standardizer, hf.theta, hf.y)
    cut = n_use - holdout_rows(n_use, val_fraction)
    return th[:cut], y[:cut], th[cut:n_use], y[cut:n_use]


def fit_dataset_standardizer(dataset, n_holdout: int = 0, idx=None) -> Standardizer:
    """Standardizer from a dataset's training rows and its prior bounds."""
    if idx is None:
        n = dataset.n_records
        if not 0 <= n_holdout < n:
            raise ValueError(f"n_holdout must lie in [0, {n}), got {n_holdout}")
        idx = np.arange(n - n_holdout)
    return fit_standardizer(dataset.theta, dataset.y, dataset.theta_lo, dataset.theta_hi, idx=idx)
