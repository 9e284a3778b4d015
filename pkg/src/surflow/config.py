"""Experiment configuration: validated settings bundles and presets.

A configuration file is JSON with an optional ``preset`` name, an
optional ``case`` selector (excitation-matched or amplitude-perturbed
high-fidelity data), and an ``overrides`` mapping merged recursively
onto the preset.  Unknown keys are rejected by name.
"""

import hashlib
import json
from dataclasses import dataclass, field

from .dynamics import FidelityConfig, StructuralConfig
from .evaluation import ScenarioSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ModelSettings:
    latent_dim: int = 8
    hidden: tuple = (64, 64)
    n_pre: int = 4
    n_post: int = 2
    clamp: float = 2.0

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "n_pre": self.n_pre,
            "n_post": self.n_post,
            "clamp": self.clamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSettings":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64)))
        return cls(**d)

    def builder_kwargs(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "hidden": tuple(self.hidden),
            "n_pre": self.n_pre,
            "n_post": self.n_post,
            "clamp": self.clamp,
        }


@dataclass
class EvalSettings:
    n_samples: int = 2000
    alpha: float = 0.95

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSettings":
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything one study needs: system, data budgets, model, training."""

    structure: StructuralConfig
    lf: FidelityConfig
    hf: FidelityConfig
    model: ModelSettings
    train_lf: TrainConfig
    train_hf: TrainConfig
    train_hf_only: TrainConfig
    scenarios: list = field(default_factory=list)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bandwidth_hz: float = 8.0
    amplitude: float = 1.0
    n_lf: int = 600
    n_hf: int = 60
    n_lf_val: int = 20
    n_hf_test: int = 20
    hf_val_fraction: float = 0.2
    series_len: int = 64
    sample_rate: float = 20.0
    seed: int = 0
    out_dir: str = "runs/out"

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n_lf >= 1 and self.n_hf >= 1, "n_lf and n_hf must be positive")
        need(self.n_hf <= self.n_lf, f"n_hf ({self.n_hf}) must not exceed n_lf ({self.n_lf})")
        need(0 <= self.n_lf_val < self.n_lf, f"n_lf_val must lie in [0, {self.n_lf})")
        need(0 <= self.n_hf_test < self.n_hf, f"n_hf_test must lie in [0, {self.n_hf})")
        need(0.0 <= self.hf_val_fraction < 1.0, "hf_val_fraction must lie in [0, 1)")
        need(self.series_len >= 1, "series_len must be positive")
        need(self.sample_rate > 0, "sample_rate must be positive")
        need(self.lf.level == "LF" and self.hf.level == "HF", "fidelity levels must be LF and HF")
        need(self.hf.stiffness_bias == 1.0, "high fidelity must be unbiased")
        ratio = self.lf.dt_sim / self.hf.dt_sim
        need(abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1,
             f"lf.dt_sim ({self.lf.dt_sim}) must be an integer multiple of hf.dt_sim ({self.hf.dt_sim})")
        for fid in (self.lf, self.hf):
            step = 1.0 / (self.sample_rate * fid.dt_sim)
            need(abs(step - round(step)) < 1e-9 and round(step) >= 1,
                 f"sample_rate {self.sample_rate} does not divide the {fid.level} grid (dt={fid.dt_sim})")
            need(self.bandwidth_hz < 0.5 / fid.dt_sim,
                 f"bandwidth_hz {self.bandwidth_hz} exceeds the {fid.level} Nyquist limit")
        need(self.eval.n_samples >= 1, "eval.n_samples must be positive")
        need(0.0 < self.eval.alpha < 1.0, "eval.alpha must lie in (0, 1)")
        labels = [sc.label for sc in self.scenarios]
        need(len(set(labels)) == len(labels), f"duplicate scenario labels: {labels}")
        pool = self.n_hf - self.n_hf_test
        for sc in self.scenarios:
            need(sc.kind == "lf_only" or sc.n_hf <= pool,
                 f"scenario {sc.label!r} asks for {sc.n_hf} records, pool has {pool}")
        return self

    @property
    def duration(self) -> float:
        return self.series_len / self.sample_rate

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "structure": self.structure.to_dict(),
            "lf": self.lf.to_dict(),
            "hf": self.hf.to_dict(),
            "model": self.model.to_dict(),
            "train_lf": self.train_lf.to_dict(),
            "train_hf": self.train_hf.to_dict(),
            "train_hf_only": self.train_hf_only.to_dict(),
            "scenarios": [sc.to_dict() for sc in self.scenarios],
            "eval": self.eval.to_dict(),
            "bandwidth_hz": self.bandwidth_hz,
            "amplitude": self.amplitude,
            "n_lf": self.n_lf,
            "n_hf": self.n_hf,
            "n_lf_val": self.n_lf_val,
            "n_hf_test": self.n_hf_test,
            "hf_val_fraction": self.hf_val_fraction,
            "series_len": self.series_len,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            return cls(
                structure=StructuralConfig.from_dict(d.pop("structure")),
                lf=FidelityConfig.from_dict(d.pop("lf")),
                hf=FidelityConfig.from_dict(d.pop("hf")),
                model=ModelSettings.from_dict(d.pop("model")),
                train_lf=TrainConfig.from_dict(d.pop("train_lf")),
                train_hf=TrainConfig.from_dict(d.pop("train_hf")),
                train_hf_only=TrainConfig.from_dict(d.pop("train_hf_only")),
                scenarios=[ScenarioSpec.from_dict(s) for s in d.pop("scenarios")],
                eval=EvalSettings.from_dict(d.pop("eval")),
                **d,
            )
        except (TypeError, KeyError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"invalid configuration: {err}") from err

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")  # relocating a run does not change what it computes
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# presets


def _hf(case: int, perturbation: float = 0.6) -> FidelityConfig:
    if case not in (1, 2):
        raise ConfigError(f"case must be 1 or 2, got {case}")
    return FidelityConfig(
        level="HF", dt_sim=0.001, excitation_perturbation=perturbation if case == 2 else None
    )


def preset_full(case: int = 1) -> ExperimentConfig:
    """Full-size study: 18 stories, 9 substructure groups, 10 s records."""
    return ExperimentConfig(
        structure=StructuralConfig(n_dof=18, n_groups=9),
        lf=FidelityConfig(level="LF", dt_sim=0.01, stiffness_bias=1.05),
        hf=_hf(case),
        model=ModelSettings(latent_dim=10, hidden=(64, 64), n_pre=4, n_post=2),
        train_lf=TrainConfig(epochs=1000, batch_size=64, lr=1e-4, seed=0),
        train_hf=TrainConfig(epochs=500, batch_size=16, lr=1e-4, seed=0),
        train_hf_only=TrainConfig(epochs=500, batch_size=16, lr=1e-4, seed=0),
        scenarios=[
            ScenarioSpec("lf-only", "lf_only"),
            ScenarioSpec("hf-only-180", "hf_only", 180),
            ScenarioSpec("mf-100", "mf", 100),
            ScenarioSpec("mf-180", "mf", 180),
        ],
        eval=EvalSettings(n_samples=2000),
        n_lf=1000,
        n_hf=200,
        series_len=200,
        out_dir=f"runs/case{case}",
    )


def preset_desk(case: int = 1) -> ExperimentConfig:
    """Desk-size study: trains in minutes on one core, same pipeline.

    The amplitude perturbation in case 2 is milder than the full-size
    study's: with only 20 test records the heavy-tailed irreducible
    error of strongly perturbed records would swamp the between-arm
    differences this preset exists to show.
    """
    return ExperimentConfig(
        structure=StructuralConfig(n_dof=9, n_groups=3),
        lf=FidelityConfig(level="LF", dt_sim=0.01, stiffness_bias=1.05),
        hf=_hf(case, perturbation=0.25),
        model=ModelSettings(latent_dim=8, hidden=(64, 64), n_pre=4, n_post=2),
        train_lf=TrainConfig(epochs=5000, batch_size=16, lr=1e-3, seed=0, early_stop_patience=600),
        train_hf=TrainConfig(epochs=1500, batch_size=8, lr=2e-4, seed=0, early_stop_patience=300),
        train_hf_only=TrainConfig(epochs=600, batch_size=4, lr=1e-3, seed=0, early_stop_patience=80),
        scenarios=[
            ScenarioSpec("lf-only", "lf_only"),
            ScenarioSpec("hf-only-40", "hf_only", 40),
            ScenarioSpec("mf-20", "mf", 20),
            ScenarioSpec("mf-40", "mf", 40),
        ],
        eval=EvalSettings(n_samples=1000),
        n_lf=300,
        n_hf=60,
        hf_val_fraction=0.25,
        series_len=64,
        out_dir=f"runs/desk-case{case}",
    )


PRESETS = {
    "case1": lambda: preset_full(1),
    "case2": lambda: preset_full(2),
    "desk_small": preset_desk,
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config field: {path}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def config_from_spec(spec: dict) -> ExperimentConfig:
    """Build a validated config from a parsed JSON mapping."""
    spec = dict(spec)
    preset_name = spec.pop("preset", None)
    case = spec.pop("case", None)
    overrides = spec.pop("overrides", {})
    if spec:
        raise ConfigError(f"unknown config field: {sorted(spec)[0]}")
    if not isinstance(overrides, dict):
        raise ConfigError("overrides must be a mapping")
    if preset_name is None:
        raise ConfigError("config needs a 'preset' name")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    if preset_name == "desk_small":
        base = preset_desk(1 if case is None else case).to_dict()
    elif case is not None:
        raise ConfigError(f"preset {preset_name!r} does not take a 'case' selector")
    else:
        base = PRESETS[preset_name]().to_dict()
    _merge(base, overrides)
    return ExperimentConfig.from_dict(base).validate()


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON configuration file."""
    try:
        with open(path) as fh:
            spec = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(spec, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_spec(spec)
