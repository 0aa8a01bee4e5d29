"""Numerical toolkit for minimal sub-Markov semigroups of drift-diffusion
generators on nested balls, their invariant densities, and the associated
entropy-production / reversibility diagnostics, cross-checked by a
Monte-Carlo simulator of the underlying stochastic dynamics."""

from __future__ import annotations

__version__ = "0.1.0"

from .model_core import (
    BallDomain,
    CutoffFunction,
    DiffusionModel,
    GridFunction,
    ModelValidationError,
    build_grid_function,
    cutoff_eval,
    model_from_config,
    validate_model,
)

__all__ = [
    "__version__",
    "BallDomain",
    "CutoffFunction",
    "DiffusionModel",
    "GridFunction",
    "ModelValidationError",
    "build_grid_function",
    "cutoff_eval",
    "model_from_config",
    "validate_model",
]
