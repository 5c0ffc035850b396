"""Run configuration: one flat key-value tree fully determines a run.

``TrainConfig`` covers model structure, objective, selection, optimization
and curriculum. Presets bundle the defaults for the built-in dataset
styles; any field can be overridden from a YAML mapping (see README for
the schema).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


def default_device() -> str:
    return os.environ.get("SPRITELAYERS_DEVICE", "cpu")


@dataclass
class TrainConfig:
    # structure
    canvas: tuple[int, int] = (35, 35)
    n_obj_layers: int = 3           # L
    n_sprites: int = 19             # K (excluding the empty sprite)
    n_backgrounds: int = 0          # K'; 0 disables the background layer
    layer_transforms: str = "col-pos"     # shared per layer
    sprite_transforms: str = ""           # specific to each sprite
    background_transforms: str = ""
    predict_occlusion: bool = True
    backbone_blocks: int = 2
    backbone_variant: str | None = None   # None: pick by image size

    # objective
    sprite_penalty: float = 1e-4          # weight of the non-empty-sprite count
    loss_reduction: str = "sum"           # "sum" | "mean" (penalty auto-scaled)

    # selection
    selection: str = "auto"               # auto | greedy | exhaustive
    greedy_steps: int = 1                 # T
    exhaustive_budget: int = 4096

    # optimization
    batch_size: int = 32
    lr: float = 1e-4
    sprite_lr: float | None = None        # None: same as lr
    weight_decay: float = 1e-6            # predictor parameters only
    lr_decay_factor: float = 0.1
    lr_decay_target: str = "predictor"    # "predictor" | "all"
    mask_noise: bool = True
    freeze_sprites_epochs: int = 5

    # curriculum
    convergence_threshold: float = 1e-3
    convergence_patience: int = 5
    max_epochs: int = 100
    max_epochs_per_stage: int | None = None

    # bookkeeping
    seed: int = 0
    device: str = field(default_factory=default_device)
    checkpoint_every: int = 0             # epochs; 0 = final only

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        if self.n_obj_layers < 1:
            raise ConfigError("need at least one object layer")
        if self.n_sprites < 1:
            raise ConfigError("need at least one sprite")
        if self.n_backgrounds < 0:
            raise ConfigError("n_backgrounds must be >= 0")
        if self.selection not in ("auto", "greedy", "exhaustive"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")
        if self.lr_decay_target not in ("predictor", "all"):
            raise ConfigError(f"unknown lr decay target {self.lr_decay_target!r}")

    @property
    def background(self) -> bool:
        return self.n_backgrounds > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# Defaults for the built-in dataset styles. Structure and optimizer values
# follow the published recipe for each style; epoch budgets are desk-scale.
PRESETS: dict[str, dict] = {
    "tetrominoes": dict(
        canvas=(35, 35), n_obj_layers=3, n_sprites=19, n_backgrounds=0,
        layer_transforms="col-pos", sprite_transforms="", background_transforms="",
        greedy_steps=1, lr=1e-4, batch_size=32, lr_decay_target="predictor",
        freeze_sprites_epochs=5,
    ),
    "multi_dsprites": dict(
        canvas=(64, 64), n_obj_layers=5, n_sprites=3, n_backgrounds=1,
        layer_transforms="col-pos", sprite_transforms="sim", background_transforms="col",
        greedy_steps=3, lr=1e-4, batch_size=32, lr_decay_target="predictor",
        freeze_sprites_epochs=5,
    ),
    "multi_dsprites2": dict(
        canvas=(64, 64), n_obj_layers=2, n_sprites=3, n_backgrounds=1,
        layer_transforms="col-pos", sprite_transforms="sim", background_transforms="col",
        greedy_steps=3, lr=1e-4, batch_size=32, lr_decay_target="predictor",
        freeze_sprites_epochs=5,
    ),
    # single object on top of a background (clustering setting)
    "clustering": dict(
        canvas=(28, 28), n_obj_layers=1, n_sprites=10, n_backgrounds=1,
        layer_transforms="", sprite_transforms="col-pos", background_transforms="col",
        greedy_steps=1, selection="exhaustive", lr=1e-3, batch_size=32,
        lr_decay_target="all", freeze_sprites_epochs=0,
    ),
}


def make_config(preset: str | None = None, **overrides) -> TrainConfig:
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data.update(PRESETS[preset])
    data.update(overrides)
    return TrainConfig.from_dict(data)


def load_run_config(path: str) -> tuple[TrainConfig, dict]:
    """Read a YAML run file; returns (TrainConfig, extras).

    Extras are the run-level keys that are not TrainConfig fields:
    ``dataset``, ``eval_dataset``, ``out_dir``, ``preset``.
    """
    try:
        with open(path) as f:
            raw_text = f.read()
        data = yaml.safe_load(raw_text)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    extras = {k: data.pop(k) for k in ("dataset", "eval_dataset", "out_dir", "preset")
              if k in data}
    extras["raw_text"] = raw_text
    cfg = make_config(extras.get("preset"), **data)
    return cfg, extras
