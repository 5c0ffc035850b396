"""Unsupervised decomposition of images into layered, transformed sprites."""

from .compositing import (compose_closed_form, compose_recursive, nothing_weight,
                          strict_order_delta, validate_delta, visible_masks)
from .config import PRESETS, ConfigError, TrainConfig, make_config
from .model import SceneModel, SceneOutputs
from .predictor import ParameterPredictor, binarize_delta, build_occlusion
from .selection import (Selection, SelectionBudgetError, penalized_loss,
                        select_exhaustive, select_greedy)
from .sprites import BackgroundBank, SpriteBank, softclip
from .transforms import (TransformModule, TransformSequence, apply_module,
                         apply_sequence, make_sequence)

__version__ = "0.1.0"

__all__ = [
    "BackgroundBank",
    "ConfigError",
    "ParameterPredictor",
    "PRESETS",
    "SceneModel",
    "SceneOutputs",
    "Selection",
    "SelectionBudgetError",
    "SpriteBank",
    "TrainConfig",
    "TransformModule",
    "TransformSequence",
    "apply_module",
    "apply_sequence",
    "binarize_delta",
    "build_occlusion",
    "compose_closed_form",
    "compose_recursive",
    "make_config",
    "make_sequence",
    "nothing_weight",
    "penalized_loss",
    "select_exhaustive",
    "select_greedy",
    "softclip",
    "strict_order_delta",
    "validate_delta",
    "visible_masks",
    "__version__",
]
