"""Truncated CNN backbones for multilabel chest X-ray classification."""

from .registry import REGISTRY, ArchitectureSpec, BlockUnit, count_params, get_spec
from .truncation import TruncationPlan, instantiate, predict_proba, truncate

__version__ = "0.1.0"

__all__ = [
    "REGISTRY",
    "ArchitectureSpec",
    "BlockUnit",
    "TruncationPlan",
    "count_params",
    "get_spec",
    "instantiate",
    "predict_proba",
    "truncate",
    "__version__",
]
