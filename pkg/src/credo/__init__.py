"""Causal-prior regularized training and effect evaluation for tabular models.

The package trains ordinary feed-forward models while pulling selected
input-gradient profiles toward user-supplied effect priors, then measures
how closely the trained model's interventional effect curves follow those
priors.  Modules:

- ``autodiff``: scalar-node tape with batched numba evaluation.
- ``network``: perceptron definition, losses, and the Adam training loop.
- ``priors``: effect-prior families, prior specs, and slope search.
- ``scm``: causal graphs, role assignments, and linear mediator models.
- ``regularizer``: the hinge penalty tying model gradients to priors.
- ``effects``: interventional effect curves and conformity metrics.
- ``data``: bundled dataset recipes, splits, and CSV IO.
- ``harness``: config-driven experiment runner behind the CLI.
"""

from .data import Dataset, binarize_output, generate, load_csv, normalize, save_csv, split
from .effects import (
    EffectCurve,
    EffectQuery,
    ModelTape,
    conformity,
    effect_grid,
    frechet_distance,
    mc_effect_curve,
    taylor_ace_curve,
)
from .harness import ExperimentConfig, load_config, run, run_slope_search, sweep
from .network import (
    Architecture,
    Perceptron,
    TrainingConfig,
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .priors import (
    PriorEntry,
    PriorFunction,
    PriorSpec,
    load_priors,
    save_priors,
    signed_class_expansion,
)
from .regularizer import (
    CredoPenalty,
    PenaltyReport,
    acde_penalty,
    ande_penalty,
    atce_penalty,
    combined_objective,
    penalty_report,
)
from .scm import CausalGraph, MediatorModel, NamedRoles, RoleAssignment, fit_mediators

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "CausalGraph",
    "CredoPenalty",
    "Dataset",
    "EffectCurve",
    "EffectQuery",
    "ExperimentConfig",
    "MediatorModel",
    "ModelTape",
    "NamedRoles",
    "PenaltyReport",
    "Perceptron",
    "PriorEntry",
    "PriorFunction",
    "PriorSpec",
    "RoleAssignment",
    "TrainResult",
    "TrainingConfig",
    "acde_penalty",
    "ande_penalty",
    "atce_penalty",
    "binarize_output",
    "combined_objective",
    "conformity",
    "effect_grid",
    "fit_mediators",
    "frechet_distance",
    "generate",
    "load_checkpoint",
    "load_config",
    "load_csv",
    "load_priors",
    "mc_effect_curve",
    "normalize",
    "penalty_report",
    "run",
    "run_slope_search",
    "save_checkpoint",
    "save_csv",
    "save_priors",
    "signed_class_expansion",
    "split",
    "sweep",
    "taylor_ace_curve",
    "train",
]
