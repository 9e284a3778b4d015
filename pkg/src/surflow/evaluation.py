"""Predictive evaluation: sampling summaries, metrics, ablation runs.

The ablation driver reproduces the study layout used throughout the
package: one low-fidelity pretraining per master seed, then per-scenario
fine-tuning (or baselines) scored on a shared held-out high-fidelity
test block.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ShapeError
from .model import FlowModel, build_default_model, flow_sample
from .seeding import derive_seed
from .standardize import Standardizer
from .training import (
    TrainConfig,
    TrainReport,
    finetune_hf,
    fit_dataset_standardizer,
    holdout_rows,
    pretrain_lf,
)
from .training import train_hf_only as _fit_hf_only

SCENARIO_KINDS = ("mf", "hf_only", "lf_only")


@dataclass
class PredictiveSummary:
    """Pointwise summary of a predictive sample set."""

    mean: np.ndarray
    std: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    alpha: float
    n_samples: int
    samples: np.ndarray | None = None


def _as_generator(rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def predict(
    model: FlowModel,
    standardizer: Standardizer,
    theta,
    n_samples: int = 2000,
    alpha: float = 0.95,
    rng=None,
    keep_samples: bool = False,
    scale: float = 1.0,
) -> PredictiveSummary:
    """Monte Carlo predictive summary at one parameter vector.

    ``theta`` is in physical units; samples are mapped back through the
    standardizer before summarizing.  ``ci_lo``/``ci_hi`` are the
    empirical ``(1 - alpha) / 2`` and ``(1 + alpha) / 2`` quantiles.
    ``scale`` widens every sampled deviation around the predictive mean
    by that factor before summarizing; fit it with ``calibrate_scale``
    to make the spread honest on held-out data.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise ShapeError(f"theta must be 1-D, got shape {theta.shape}", tensor="theta")
    rng = _as_generator(rng)
    t_std = standardizer.transform_theta(theta)
    samples = standardizer.inverse_y(flow_sample(model, t_std, n_samples, rng))
    if scale != 1.0:
        center = samples.mean(axis=0)
        samples = center + scale * (samples - center)
    lo, hi = np.quantile(samples, [(1 - alpha) / 2, (1 + alpha) / 2], axis=0)
    return PredictiveSummary(
        mean=samples.mean(axis=0),
        std=samples.std(axis=0),
        ci_lo=lo,
        ci_hi=hi,
        alpha=alpha,
        n_samples=n_samples,
        samples=samples if keep_samples else None,
    )


def calibrate_scale(
    model: FlowModel,
    standardizer: Standardizer,
    theta_val,
    y_val,
    n_samples: int = 500,
    rng=None,
    floor: float = 1.0,
) -> float:
    """Dispersion factor matching the predictive spread to held-out residuals.

    A best-validation snapshot tends to be optimistic about its own
    spread, so raw credible intervals undercover on fresh data.  This
    fits the classic one-parameter variance-scaling correction: the
    root mean square of standardized held-out residuals, pooled over
    every cell of every validation record.  Pass the result as the
    ``scale`` of :func:`predict`.  The estimate is clipped below at
    ``floor`` (default 1: never narrow the likelihood fit) and returned
    as ``floor`` when there are no validation rows.
    """
    theta_val = np.asarray(theta_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if theta_val.ndim != 2 or y_val.ndim != 2 or theta_val.shape[0] != y_val.shape[0]:
        raise ShapeError(
            f"expected matching 2-D arrays, got {theta_val.shape} and {y_val.shape}",
            tensor="theta_val",
        )
    if floor <= 0.0:
        raise ValueError(f"floor must be positive, got {floor}")
    if theta_val.shape[0] == 0:
        return floor
    rng = _as_generator(rng)
    ratios_sq = 0.0
    for i in range(theta_val.shape[0]):
        ps = predict(model, standardizer, theta_val[i], n_samples, rng=rng)
        spread = np.maximum(ps.std, 1e-12 * standardizer.y_std)
        ratios_sq += float(np.mean(((y_val[i] - ps.mean) / spread) ** 2))
    return max(floor, float(np.sqrt(ratios_sq / theta_val.shape[0])))


# ---------------------------------------------------------------------------
# metrics


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}", tensor="pred")
    return pred, truth


def relative_l2(pred, truth):
    """||pred - truth|| / ||truth|| along the last axis."""
    pred, truth = _paired(pred, truth)
    denom = np.linalg.norm(truth, axis=-1)
    if np.any(denom == 0.0):
        raise ValueError("relative_l2 is undefined for an all-zero truth series")
    out = np.linalg.norm(pred - truth, axis=-1) / denom
    return float(out) if out.ndim == 0 else out


def r_squared(pred, truth):
    """Coefficient of determination along the last axis."""
    pred, truth = _paired(pred, truth)
    ss_tot = np.sum((truth - truth.mean(axis=-1, keepdims=True)) ** 2, axis=-1)
    if np.any(ss_tot == 0.0):
        raise ValueError("r_squared is undefined for a constant truth series")
    ss_res = np.sum((pred - truth) ** 2, axis=-1)
    out = 1.0 - ss_res / ss_tot
    return float(out) if out.ndim == 0 else out


def coverage_rate(ci_lo, ci_hi, truth) -> float:
    """Fraction of cells whose truth falls inside [ci_lo, ci_hi]."""
    lo = np.asarray(ci_lo, dtype=np.float64)
    hi = np.asarray(ci_hi, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if not lo.shape == hi.shape == truth.shape:
        raise ShapeError(
            f"mismatched shapes: {lo.shape}, {hi.shape}, {truth.shape}", tensor="ci_lo"
        )
    if np.any(hi < lo):
        raise ValueError("ci_hi must be >= ci_lo everywhere")
    return float(np.mean((truth >= lo) & (truth <= hi)))


# ---------------------------------------------------------------------------
# ablation study


@dataclass(frozen=True)
class ScenarioSpec:
    """One ablation arm: a training recipe and its data budget."""

    label: str
    kind: str
    n_hf: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")
        if self.kind == "lf_only":
            if self.n_hf != 0:
                raise ValueError("lf_only scenarios take no high-fidelity records")
        elif self.n_hf < 1:
            raise ValueError(f"{self.kind} scenario needs n_hf >= 1, got {self.n_hf}")
        if not self.label:
            raise ValueError("scenario label must be non-empty")

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind, "n_hf": self.n_hf}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(label=d["label"], kind=d["kind"], n_hf=int(d.get("n_hf", 0)))


@dataclass
class AblationResult:
    """Scores for one scenario at one master seed."""

    label: str
    kind: str
    n_hf: int
    seed: int
    rel_l2: np.ndarray
    r2: np.ndarray
    coverage: float
    scale: float = 1.0
    report: TrainReport | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    truth: np.ndarray | None = None

    @property
    def median_rel_l2(self) -> float:
        return float(np.median(self.rel_l2))

    @property
    def median_r2(self) -> float:
        return float(np.median(self.r2))


def _score(model, standardizer, theta_test, y_test, n_samples, alpha, sseed, scale=1.0):
    n_test = theta_test.shape[0]
    rel = np.empty(n_test)
    r2 = np.empty(n_test)
    lo = np.empty_like(y_test)
    hi = np.empty_like(y_test)
    for t in range(n_test):
        rng = np.random.default_rng(derive_seed(sseed, f"predict:{t}"))
        ps = predict(model, standardizer, theta_test[t], n_samples, alpha, rng, scale=scale)
        rel[t] = relative_l2(ps.mean, y_test[t])
        r2[t] = r_squared(ps.mean, y_test[t])
        lo[t] = ps.ci_lo
        hi[t] = ps.ci_hi
    return rel, r2, coverage_rate(lo, hi, y_test), lo, hi


def run_ablation(
    lf_dataset,
    hf_dataset,
    scenarios,
    *,
    seed: int,
    model_kwargs: dict,
    train_lf: TrainConfig,
    train_hf: TrainConfig,
    train_hf_only: TrainConfig | None = None,
    n_lf_val: int = 20,
    n_hf_test: int = 20,
    hf_val_fraction: float = 0.1,
    n_samples: int = 500,
    alpha: float = 0.95,
    keep_intervals: bool = False,
    calibrate: bool = True,
) -> list[AblationResult]:
    """Train and score every scenario against a shared test block.

    The low-fidelity model is pretrained once per master ``seed`` and
    reused by every ``mf`` and ``lf_only`` scenario.  ``hf_only``
    scenarios build a fresh model and standardize with their own
    training rows.  The last ``n_hf_test`` high-fidelity records are
    scored and never trained on.  With ``calibrate`` on (the default)
    each arm's predictive spread is rescaled by :func:`calibrate_scale`
    fit on that arm's own validation rows before scoring.
    """
    pool = hf_dataset.n_records - n_hf_test
    if pool < 1:
        raise ValueError("no high-fidelity records left after the test block")
    for sc in scenarios:
        if sc.kind != "lf_only" and sc.n_hf > pool:
            raise ValueError(f"scenario {sc.label!r} wants {sc.n_hf} records, pool has {pool}")
    if train_hf_only is None:
        train_hf_only = train_hf

    lf_std = fit_dataset_standardizer(lf_dataset, n_holdout=n_lf_val)
    width = lf_dataset.y.shape[1]
    m = lf_dataset.theta.shape[1]
    lf_model = build_default_model(
        data_dim=width, cond_dim=m, seed=derive_seed(seed, "lf-init"), **model_kwargs
    )
    lf_cfg = replace(train_lf, seed=derive_seed(seed, "lf-train"))
    lf_phi, lf_report = pretrain_lf(lf_model, lf_dataset, lf_cfg, lf_std, n_val=n_lf_val)
    lf_model.params.restore(lf_phi)

    theta_test = hf_dataset.theta[-n_hf_test:]
    y_test = hf_dataset.y[-n_hf_test:]

    results = []
    seen: dict[str, int] = {}
    for sc in scenarios:
        # scenario seeds hang off the label so reordering arms changes
        # nothing; repeated labels get an occurrence suffix and therefore
        # run as independent replicates
        k = seen.get(sc.label, 0)
        seen[sc.label] = k + 1
        tag = sc.label if k == 0 else f"{sc.label}#{k}"
        sseed = derive_seed(seed, f"scenario:{tag}")
        report = None
        if sc.kind == "lf_only":
            model, std = lf_model, lf_std
            model.params.restore(lf_phi)
            n_cal = n_lf_val
            theta_cal = lf_dataset.theta[len(lf_dataset.theta) - n_cal :]
            y_cal = lf_dataset.y[len(lf_dataset.y) - n_cal :]
        elif sc.kind == "mf":
            cfg = replace(train_hf, seed=derive_seed(sseed, "train"))
            snap, report = finetune_hf(
                lf_model, lf_phi, hf_dataset, cfg, lf_std,
                n_test=n_hf_test, n_use=sc.n_hf, val_fraction=hf_val_fraction,
            )
            lf_model.params.restore(snap)
            model, std = lf_model, lf_std
            n_cal = holdout_rows(sc.n_hf, hf_val_fraction)
            theta_cal = hf_dataset.theta[sc.n_hf - n_cal : sc.n_hf]
            y_cal = hf_dataset.y[sc.n_hf - n_cal : sc.n_hf]
        else:
            std = fit_dataset_standardizer(hf_dataset, idx=np.arange(sc.n_hf))
            model = build_default_model(
                data_dim=width, cond_dim=m, seed=derive_seed(sseed, "init"), **model_kwargs
            )
            cfg = replace(train_hf_only, seed=derive_seed(sseed, "train"))
            snap, report = _fit_hf_only(
                model, hf_dataset, cfg, std,
                n_test=n_hf_test, n_use=sc.n_hf, val_fraction=hf_val_fraction,
            )
            model.params.restore(snap)
            n_cal = holdout_rows(sc.n_hf, hf_val_fraction)
            theta_cal = hf_dataset.theta[sc.n_hf - n_cal : sc.n_hf]
            y_cal = hf_dataset.y[sc.n_hf - n_cal : sc.n_hf]
        scale = 1.0
        if calibrate and n_cal > 0:
            scale = calibrate_scale(
                model, std, theta_cal, y_cal,
                n_samples=n_samples,
                rng=np.random.default_rng(derive_seed(sseed, "calibrate")),
            )
        rel, r2, cov, lo, hi = _score(
            model, std, theta_test, y_test, n_samples, alpha, sseed, scale=scale
        )
        results.append(
            AblationResult(
                label=sc.label,
                kind=sc.kind,
                n_hf=sc.n_hf,
                seed=seed,
                rel_l2=rel,
                r2=r2,
                coverage=cov,
                scale=scale,
                report=report,
                ci_lo=lo if keep_intervals else None,
                ci_hi=hi if keep_intervals else None,
                truth=y_test if keep_intervals else None,
            )
        )
    return results
