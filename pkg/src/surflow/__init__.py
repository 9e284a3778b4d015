"""Probabilistic multi-fidelity surrogates built on conditional
surjective normalizing flows, with a synthetic structural-dynamics data
generator and a command line front end."""

__version__ = "0.1.0"

from .autodiff import MlpSpec, ParamStore, ShapeError, Tape, backward, gaussian_logpdf, mlp_forward
from .config import ConfigError, ExperimentConfig, load_config, preset_desk, preset_full
from .dynamics import (
    Dataset,
    ExcitationSpec,
    FidelityConfig,
    StructuralConfig,
    generate_excitation,
    generate_pairs,
    newmark_solve,
    simulate_response,
)
from .estimator import FlowSurrogate
from .evaluation import (
    PredictiveSummary,
    ScenarioSpec,
    calibrate_scale,
    coverage_rate,
    predict,
    r_squared,
    relative_l2,
    run_ablation,
)
from .layers import CouplingLayer, FunnelLayer, NonFiniteError, PermutationLayer
from .model import (
    FlowModel,
    build_default_model,
    flow_loglik,
    flow_sample,
    load_model,
    log_prob,
    save_model,
)
from .optim import AdamState, adam_step
from .seeding import derive_seed
from .standardize import Standardizer, fit_standardizer
from .training import (
    TrainConfig,
    TrainReport,
    TrainingDiverged,
    finetune_hf,
    fit_dataset_standardizer,
    pretrain_lf,
    train_hf_only,
)

__all__ = [
    "AdamState",
    "ConfigError",
    "CouplingLayer",
    "Dataset",
    "ExcitationSpec",
    "ExperimentConfig",
    "FidelityConfig",
    "FlowModel",
    "FlowSurrogate",
    "FunnelLayer",
    "MlpSpec",
    "NonFiniteError",
    "ParamStore",
    "PermutationLayer",
    "PredictiveSummary",
    "ScenarioSpec",
    "ShapeError",
    "Standardizer",
    "StructuralConfig",
    "Tape",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "adam_step",
    "backward",
    "build_default_model",
    "calibrate_scale",
    "coverage_rate",
    "derive_seed",
    "finetune_hf",
    "fit_dataset_standardizer",
    "fit_standardizer",
    "flow_loglik",
    "flow_sample",
    "gaussian_logpdf",
    "generate_excitation",
    "generate_pairs",
    "load_config",
    "load_model",
    "log_prob",
    "mlp_forward",
    "newmark_solve",
    "predict",
    "preset_desk",
    "preset_full",
    "pretrain_lf",
    "r_squared",
    "relative_l2",
    "run_ablation",
    "save_model",
    "simulate_response",
    "train_hf_only",
    "__version__",
]
