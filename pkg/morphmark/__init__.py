"""Defines the public morphmark interface"""
__all__ = (
    "Config",
    "Dataset",
    "EvalReport",
    "__version__",
    "evaluate",
    "evaluate_predictions",
    "generate_dataset",
    "infer_pseudo_labels",
    "load_dataset",
    "render_overlays",
    "run_stage1",
    "run_stage2",
    "settings",
)

from . import settings
from ._version import __version__
from .api import (
    evaluate_predictions,
    generate_dataset,
    infer_pseudo_labels,
    render_overlays,
    run_stage1,
    run_stage2,
)
from .dataset import Dataset, load_dataset
from .settings import Config
from .synthbench import EvalReport, evaluate
