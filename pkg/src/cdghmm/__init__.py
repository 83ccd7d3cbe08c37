"""Hidden Markov models with modified-Cholesky Gaussian emissions for panel
data, estimated by an EM that handles non-random missingness and dropout."""

from .cholesky import ModCholPair, decompose, log_density, reconstruct_sigma, reconstruct_sigma_inverse
from .em import FitConfig, FitResult, fit, initialize, local_decode
from .errors import CdghmmError, DataError
from .forward_backward import Posteriors, backward, forward, posteriors
from .io import load_fit, load_panel, save_fit, save_panel
from .metrics import ScoreReport, score
from .missingness import ImputedMoments, MissDesign, conditional_moments, fit_miss_params, miss_log_prob
from .simulate import SimSpec, apply_mnar_mask, generate, run_study
from .solvers import WeightedScatter, solve_member, update_mean_and_scatter
from .types import (
    MECHANISMS,
    STRUCTURE_NAMES,
    HmmParams,
    MissParams,
    ModelStructure,
    PanelDataset,
    count_free_params,
    total_free_params,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "CdghmmError",
    "DataError",
    "FitConfig",
    "FitResult",
    "HmmParams",
    "ImputedMoments",
    "MECHANISMS",
    "MissDesign",
    "MissParams",
    "ModCholPair",
    "ModelStructure",
    "PanelDataset",
    "Posteriors",
    "STRUCTURE_NAMES",
    "ScoreReport",
    "SimSpec",
    "WeightedScatter",
    "apply_mnar_mask",
    "backward",
    "conditional_moments",
    "count_free_params",
    "decompose",
    "fit",
    "fit_miss_params",
    "forward",
    "generate",
    "initialize",
    "load_fit",
    "load_panel",
    "local_decode",
    "log_density",
    "miss_log_prob",
    "posteriors",
    "reconstruct_sigma",
    "reconstruct_sigma_inverse",
    "run_study",
    "save_fit",
    "save_panel",
    "score",
    "solve_member",
    "total_free_params",
    "update_mean_and_scatter",
    "validate",
]
