"""Bayesian multivariate spatial small-area estimation with global-local shrinkage."""
from .diagnostics import FitSummary, compute_dic, effective_sample_size, morans_i, summarize_fit
from .mcmc import ChainConfig, ChainError, run_chain
from .model import (AreaDataset, ChainState, ModelError, ModelSpec, PosteriorDraws, SpatialStructure,
                    Variant, kron_quadratic_form, log_det_spatial, matrix_shrinkage_factor)
from .simulation import MetricTable, ScenarioSpec, build_lattice, compute_metrics, gen_dataset, run_study

__version__ = "0.1.0"

__all__ = [
    "AreaDataset", "ChainConfig", "ChainError", "ChainState", "FitSummary", "MetricTable", "ModelError",
    "ModelSpec", "PosteriorDraws", "ScenarioSpec", "SpatialStructure", "Variant", "build_lattice",
    "compute_dic", "compute_metrics", "effective_sample_size", "gen_dataset", "kron_quadratic_form",
    "log_det_spatial", "matrix_shrinkage_factor", "morans_i", "run_chain", "run_study", "summarize_fit",
]
