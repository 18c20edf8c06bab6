"""End-to-end symbolic regression toolkit."""

from .expr import evaluate, evaluate_batch, from_prefix, to_infix, to_prefix
from .pipeline import PipelineConfig, SymbolicRegressor, fit_candidates

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "SymbolicRegressor",
    "evaluate",
    "evaluate_batch",
    "fit_candidates",
    "from_prefix",
    "to_infix",
    "to_prefix",
]
