"""Command-line pipeline: generate, train, predict, ablate, evaluate.

Every command reads one JSON config (see ``surflow.config``) and works
inside the config's ``out_dir``:

    data/          paired datasets (CSV + manifest)
    checkpoints/   model architecture, parameters, standardizers, metadata
    reports/       per-epoch training curves
    predictions/   predictive summary for one parameter vector
    ablation/      per-record scores and aggregated summary
    eval/          plot-ready per-record test curves

Exit codes: 0 success, 1 runtime failure, 2 configuration problem.
"""

import argparse
import csv
import json
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import Dataset, generate_pairs
from .evaluation import (
    calibrate_scale,
    coverage_rate,
    predict,
    r_squared,
    relative_l2,
    run_ablation,
)
from .model import build_default_model, load_model, save_model
from .seeding import derive_seed
from .standardize import Standardizer
from .training import (
    finetune_hf,
    fit_dataset_standardizer,
    holdout_rows,
    pretrain_lf,
    train_hf_only,
)

STAGES = ("lf", "mf", "hf-only")


def _dirs(cfg: ExperimentConfig) -> dict:
    root = Path(cfg.out_dir)
    return {
        "root": root,
        "data": root / "data",
        "checkpoints": root / "checkpoints",
        "reports": root / "reports",
        "predictions": root / "predictions",
        "ablation": root / "ablation",
        "eval": root / "eval",
    }


def _load_datasets(cfg):
    d = _dirs(cfg)["data"]
    lf_prefix, hf_prefix = d / "lf", d / "hf"
    if not (d / "lf.csv").exists() or not (d / "hf.csv").exists():
        raise ConfigError(f"no datasets under {d}; run 'surflow generate' first")
    return Dataset.load(lf_prefix), Dataset.load(hf_prefix)


def _save_meta(path: Path, cfg, stage: str, report, extra=None) -> None:
    meta = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "epochs_run": report.epochs_run if report else 0,
        "best_epoch": report.best_epoch if report else -1,
        "best_val_nll": (min(report.val_nll) if report and report.val_nll else None),
    }
    if extra:
        meta.update(extra)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _check_meta(path: Path, cfg, stage: str) -> None:
    if not path.exists():
        raise ConfigError(f"missing checkpoint metadata {path}; run 'surflow train --stage {stage}' first")
    meta = json.loads(path.read_text())
    if meta.get("config_hash") != cfg.config_hash():
        raise ConfigError(
            f"checkpoint {path.parent / meta.get('stage', stage)} was built from a different"
            " configuration; regenerate it or use the original config"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig) -> int:
    d = _dirs(cfg)
    d["data"].mkdir(parents=True, exist_ok=True)
    lf_ds, hf_ds = generate_pairs(
        cfg.structure,
        cfg.lf,
        cfg.hf,
        n_lf=cfg.n_lf,
        n_hf=cfg.n_hf,
        seed=derive_seed(cfg.seed, "data"),
        bandwidth_hz=cfg.bandwidth_hz,
        amplitude=cfg.amplitude,
        n_out=cfg.series_len,
        out_rate=cfg.sample_rate,
    )
    lf_ds.save(d["data"] / "lf")
    hf_ds.save(d["data"] / "hf")
    print(f"wrote {cfg.n_lf} LF and {cfg.n_hf} HF records under {d['data']}")
    return 0


def _calibrate(cfg, stage, model, std, theta_val, y_val):
    if len(y_val) == 0:
        return 1.0
    rng = np.random.default_rng(derive_seed(cfg.seed, f"calibrate:{stage}"))
    return calibrate_scale(model, std, theta_val, y_val, n_samples=cfg.eval.n_samples, rng=rng)


def _train_lf(cfg, d, lf_ds):
    std = fit_dataset_standardizer(lf_ds, n_holdout=cfg.n_lf_val)
    model = build_default_model(
        data_dim=cfg.series_len,
        cond_dim=cfg.structure.n_groups,
        seed=derive_seed(cfg.seed, "lf-init"),
        **cfg.model.builder_kwargs(),
    )
    cfg_lf = replace(cfg.train_lf, seed=derive_seed(cfg.seed, "lf-train"))
    t0 = time.perf_counter()
    snap, report = pretrain_lf(model, lf_ds, cfg_lf, std, n_val=cfg.n_lf_val)
    model.params.restore(snap)
    n_val = cfg.n_lf_val
    scale = _calibrate(
        cfg, "lf", model, std,
        lf_ds.theta[cfg.n_lf - n_val :], lf_ds.y[cfg.n_lf - n_val :],
    )
    save_model(model, d["checkpoints"] / "lf")
    std.save(d["checkpoints"] / "standardizer.json")
    report.to_csv(d["reports"] / "lf_report.csv")
    _save_meta(
        d["checkpoints"] / "lf.meta.json", cfg, "lf", report,
        {
            "n_params": model.params.n_params,
            "scale": scale,
            "train_seconds": round(time.perf_counter() - t0, 3),
        },
    )
    return report


def _train_mf(cfg, d, hf_ds):
    _check_meta(d["checkpoints"] / "lf.meta.json", cfg, "lf")
    model = load_model(d["checkpoints"] / "lf")
    std = Standardizer.load(d["checkpoints"] / "standardizer.json")
    phi = model.params.snapshot()
    cfg_hf = replace(cfg.train_hf, seed=derive_seed(cfg.seed, "mf-train"))
    t0 = time.perf_counter()
    snap, report = finetune_hf(
        model, phi, hf_ds, cfg_hf, std,
        n_test=cfg.n_hf_test, val_fraction=cfg.hf_val_fraction,
    )
    model.params.restore(snap)
    pool = cfg.n_hf - cfg.n_hf_test
    n_val = holdout_rows(pool, cfg.hf_val_fraction)
    scale = _calibrate(
        cfg, "mf", model, std,
        hf_ds.theta[pool - n_val : pool], hf_ds.y[pool - n_val : pool],
    )
    save_model(model, d["checkpoints"] / "mf")
    report.to_csv(d["reports"] / "mf_report.csv")
    _save_meta(
        d["checkpoints"] / "mf.meta.json", cfg, "mf", report,
        {
            "n_params": model.params.n_params,
            "scale": scale,
            "train_seconds": round(time.perf_counter() - t0, 3),
        },
    )
    return report


def _train_hf_only(cfg, d, hf_ds):
    pool = cfg.n_hf - cfg.n_hf_test
    std = fit_dataset_standardizer(hf_ds, idx=np.arange(pool))
    model = build_default_model(
        data_dim=cfg.series_len,
        cond_dim=cfg.structure.n_groups,
        seed=derive_seed(cfg.seed, "hf-only-init"),
        **cfg.model.builder_kwargs(),
    )
    cfg_hb = replace(cfg.train_hf_only, seed=derive_seed(cfg.seed, "hf-only-train"))
    t0 = time.perf_counter()
    snap, report = train_hf_only(
        model, hf_ds, cfg_hb, std,
        n_test=cfg.n_hf_test, val_fraction=cfg.hf_val_fraction,
    )
    model.params.restore(snap)
    n_val = holdout_rows(pool, cfg.hf_val_fraction)
    scale = _calibrate(
        cfg, "hf-only", model, std,
        hf_ds.theta[pool - n_val : pool], hf_ds.y[pool - n_val : pool],
    )
    save_model(model, d["checkpoints"] / "hf-only")
    std.save(d["checkpoints"] / "hf-only.standardizer.json")
    report.to_csv(d["reports"] / "hf-only_report.csv")
    _save_meta(
        d["checkpoints"] / "hf-only.meta.json", cfg, "hf-only", report,
        {
            "n_params": model.params.n_params,
            "scale": scale,
            "train_seconds": round(time.perf_counter() - t0, 3),
        },
    )
    return report


def cmd_train(cfg: ExperimentConfig, stage: str) -> int:
    d = _dirs(cfg)
    d["checkpoints"].mkdir(parents=True, exist_ok=True)
    d["reports"].mkdir(parents=True, exist_ok=True)
    lf_ds, hf_ds = _load_datasets(cfg)
    if stage == "lf":
        report = _train_lf(cfg, d, lf_ds)
    elif stage == "mf":
        report = _train_mf(cfg, d, hf_ds)
    else:
        report = _train_hf_only(cfg, d, hf_ds)
    best = min(report.val_nll) if report.val_nll else float("nan")
    print(f"stage {stage}: {report.epochs_run} epochs, best val NLL {best:.4f} at epoch {report.best_epoch}")
    return 0


def _load_stage(cfg, stage: str):
    d = _dirs(cfg)
    meta_path = d["checkpoints"] / f"{stage}.meta.json"
    _check_meta(meta_path, cfg, stage)
    model = load_model(d["checkpoints"] / stage)
    std_name = "hf-only.standardizer.json" if stage == "hf-only" else "standardizer.json"
    std = Standardizer.load(d["checkpoints"] / std_name)
    scale = float(json.loads(meta_path.read_text()).get("scale", 1.0))
    return model, std, scale


def _parse_theta(cfg, inline: str | None, path: str | None) -> np.ndarray:
    if (inline is None) == (path is None):
        raise ConfigError("pass exactly one of --theta or --theta-file")
    text = inline if inline is not None else Path(path).read_text()
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    try:
        theta = np.array([float(p) for p in parts])
    except ValueError as err:
        raise ConfigError(f"could not parse parameter vector: {err}") from err
    m = cfg.structure.n_groups
    if theta.shape != (m,):
        raise ConfigError(f"expected {m} parameters, got {theta.size}")
    return theta


def cmd_predict(cfg: ExperimentConfig, args) -> int:
    theta = _parse_theta(cfg, args.theta, args.theta_file)
    n_samples = cfg.eval.n_samples if args.n_samples is None else args.n_samples
    alpha = cfg.eval.alpha if args.alpha is None else args.alpha
    if n_samples < 100:
        print(f"warning: {n_samples} draws gives coarse quantiles; consider >= 100", file=sys.stderr)
    model, std, scale = _load_stage(cfg, args.stage)
    d = _dirs(cfg)
    d["predictions"].mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(cfg.seed, "predict-cli"))
    ps = predict(model, std, theta, n_samples=n_samples, alpha=alpha, rng=rng, scale=scale)
    times = (np.arange(cfg.series_len) + 1) / cfg.sample_rate
    with open(d["predictions"] / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean", "std", "ci_lo", "ci_hi"])
        for row in zip(times, ps.mean, ps.std, ps.ci_lo, ps.ci_hi):
            writer.writerow([f"{v:.17g}" for v in row])
    stats = {
        "stage": args.stage,
        "theta": theta.tolist(),
        "n_samples": n_samples,
        "alpha": alpha,
        "scale": scale,
        "config_hash": cfg.config_hash(),
    }
    (d["predictions"] / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"wrote predictive summary ({n_samples} draws) to {d['predictions'] / 'summary.csv'}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, seeds: list[int]) -> int:
    d = _dirs(cfg)
    d["ablation"].mkdir(parents=True, exist_ok=True)
    lf_ds, hf_ds = _load_datasets(cfg)
    rows = []
    summary = {}
    for seed in seeds:
        results = run_ablation(
            lf_ds,
            hf_ds,
            cfg.scenarios,
            seed=seed,
            model_kwargs=cfg.model.builder_kwargs(),
            train_lf=cfg.train_lf,
            train_hf=cfg.train_hf,
            train_hf_only=cfg.train_hf_only,
            n_lf_val=cfg.n_lf_val,
            n_hf_test=cfg.n_hf_test,
            hf_val_fraction=cfg.hf_val_fraction,
            n_samples=cfg.eval.n_samples,
            alpha=cfg.eval.alpha,
        )
        for r in results:
            for t in range(len(r.rel_l2)):
                rows.append([r.label, r.kind, r.n_hf, r.seed, t, f"{r.rel_l2[t]:.17g}", f"{r.r2[t]:.17g}"])
            summary.setdefault(r.label, []).append(
                {
                    "seed": r.seed,
                    "median_rel_l2": r.median_rel_l2,
                    "median_r2": r.median_r2,
                    "coverage": r.coverage,
                    "scale": r.scale,
                }
            )
        print(f"seed {seed}: " + "  ".join(f"{r.label}={r.median_rel_l2:.3f}" for r in results))
    with open(d["ablation"] / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "kind", "n_hf", "seed", "record", "rel_l2", "r2"])
        writer.writerows(rows)
    (d["ablation"] / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} rows to {d['ablation'] / 'records.csv'}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, stage: str) -> int:
    d = _dirs(cfg)
    d["eval"].mkdir(parents=True, exist_ok=True)
    _, hf_ds = _load_datasets(cfg)
    model, std, scale = _load_stage(cfg, stage)
    theta_test = hf_ds.theta[-cfg.n_hf_test :]
    y_test = hf_ds.y[-cfg.n_hf_test :]
    times = (np.arange(cfg.series_len) + 1) / cfg.sample_rate
    rels, r2s = [], []
    lo_all = np.empty_like(y_test)
    hi_all = np.empty_like(y_test)
    for t in range(cfg.n_hf_test):
        rng = np.random.default_rng(derive_seed(cfg.seed, f"evaluate:{t}"))
        ps = predict(model, std, theta_test[t], cfg.eval.n_samples, cfg.eval.alpha, rng, scale=scale)
        rels.append(relative_l2(ps.mean, y_test[t]))
        r2s.append(r_squared(ps.mean, y_test[t]))
        lo_all[t], hi_all[t] = ps.ci_lo, ps.ci_hi
        with open(d["eval"] / f"record_{t:02d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "truth", "mean", "ci_lo", "ci_hi"])
            for row in zip(times, y_test[t], ps.mean, ps.ci_lo, ps.ci_hi):
                writer.writerow([f"{v:.17g}" for v in row])
    metrics = {
        "stage": stage,
        "n_test": cfg.n_hf_test,
        "median_rel_l2": float(np.median(rels)),
        "median_r2": float(np.median(r2s)),
        "coverage": coverage_rate(lo_all, hi_all, y_test),
        "alpha": cfg.eval.alpha,
        "scale": scale,
        "config_hash": cfg.config_hash(),
    }
    (d["eval"] / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(
        f"stage {stage}: median rel L2 {metrics['median_rel_l2']:.4f}, "
        f"median R^2 {metrics['median_r2']:.4f}, coverage {metrics['coverage']:.3f}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(p) for p in re.split(r"[,\s]+", text.strip()) if p]
    except ValueError as err:
        raise ConfigError(f"could not parse --seeds: {err}") from err
    if not seeds:
        raise ConfigError("--seeds must list at least one integer")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surflow",
        description="Multi-fidelity flow surrogates for structural response series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="override the config's out_dir")
        p.add_argument("--seed", type=int, help="override the config's master seed")

    p = sub.add_parser("generate", help="simulate paired low/high fidelity datasets")
    common(p)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p)
    p.add_argument("--stage", choices=STAGES, required=True)

    p = sub.add_parser("predict", help="predictive summary at one parameter vector")
    common(p)
    p.add_argument("--stage", choices=STAGES, default="mf")
    p.add_argument("--theta", help="comma-separated parameter values")
    p.add_argument("--theta-file", help="file containing the parameter values")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("ablate", help="train and score every configured scenario")
    common(p)
    p.add_argument("--seeds", help="comma-separated master seeds (default: config seed)")

    p = sub.add_parser("evaluate", help="score a trained stage on the held-out test block")
    common(p)
    p.add_argument("--stage", choices=STAGES, default="mf")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "predict":
            return cmd_predict(cfg, args)
        if args.command == "ablate":
            seeds = _parse_seeds(args.seeds) if args.seeds else [cfg.seed]
            return cmd_ablate(cfg, seeds)
        return cmd_evaluate(cfg, args.stage)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - single CLI failure boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
