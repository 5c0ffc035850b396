"""Training loop: staged curriculum, learning-rate policy, reassignment.

Each batch runs the full pipeline: predict parameters and occlusion,
render the candidate grid with mask noise, select sprite indices (a
discrete argmin treated as constant), then backpropagate the penalized
reconstruction loss of the chosen combination through the composite, the
transforms and the softclip into sprites, backgrounds and the predictor.

Transformation modules activate sequentially: training runs at a constant
learning rate until the epoch-mean loss stops improving, then the next
module goes live; once every module is active the learning rate is
multiplied by 0.1 exactly once (for the predictor only in multi-object
runs, for everything in single-object runs). Sprites can stay frozen for
the first epochs of multi-object runs while the layer-wise transforms
warm up. Under-used sprites are re-seeded from the most-used one at epoch
boundaries.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .config import TrainConfig
from .datagen import SceneDataset
from .model import SceneModel
from .selection import penalized_loss
from .sprites import reassign_dead_sprites


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the batch/stage/lr context."""


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    stage: int = 0                 # index of the newest active curriculum stage
    stage_epochs: int = 0          # epochs spent in the current stage
    stage_losses: list = field(default_factory=list)
    lr_decayed: bool = False
    complete: bool = False
    last_loss: float = math.nan
    usage: list = field(default_factory=list)


def curriculum_plan(model: SceneModel) -> list[list[str]]:
    """Stage layout: layer-wise and background modules first (in sequence
    order, side by side), sprite-specific modules afterwards."""
    n_lay = len(model.lay_seq.modules)
    n_spr = len(model.spr_seq.modules)
    n_bkg = len(model.bkg_seq.modules)
    plan: list[list[str]] = []
    for i in range(max(n_lay, n_bkg)):
        stage = []
        if i < n_lay:
            stage.append("lay")
        if i < n_bkg:
            stage.append("bkg")
        plan.append(stage)
    plan.extend([["spr"]] * n_spr)
    return plan


class Trainer:
    def __init__(self, config: TrainConfig, dataset: SceneDataset,
                 out_dir: str | Path | None = None, verbose: bool = False):
        if dataset.canvas != tuple(config.canvas):
            raise ValueError(
                f"dataset canvas {dataset.canvas} does not match config {config.canvas}")
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.verbose = verbose
        self.device = torch.device(config.device)

        torch.manual_seed(config.seed)
        self.model = SceneModel(config).to(self.device)
        if self.model.background_bank is not None:
            self.model.background_bank.init_from_mean(
                dataset.mean_image().to(self.device))
        self.generator = torch.Generator(device=self.device).manual_seed(config.seed)

        sprite_params = list(self.model.sprite_bank.parameters())
        if self.model.background_bank is not None:
            sprite_params += list(self.model.background_bank.parameters())
        self.optimizer = torch.optim.Adam([
            {"name": "sprites", "params": sprite_params,
             "lr": config.sprite_lr if config.sprite_lr is not None else config.lr,
             "weight_decay": 0.0},
            {"name": "predictor", "params": list(self.model.predictor.parameters()),
             "lr": config.lr, "weight_decay": config.weight_decay},
        ])

        # all sequences start inactive; the first stage goes live immediately
        for seq in self.model.sequences.values():
            seq.n_active = 0
        self.plan = curriculum_plan(self.model)
        self.state = TrainState()
        if self.plan:
            self._activate_stage(0)
        self.history: list[dict] = []
        self._usage_counts = torch.zeros(config.n_sprites + 1, dtype=torch.long)
        self._usage_total = 0
        self._log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- curriculum ----------------------------------------------------------

    def _activate_stage(self, stage: int) -> None:
        for family in self.plan[stage]:
            self.model.sequences[family].activate_next()
        self.state.stage = stage
        self.state.stage_epochs = 0
        self.state.stage_losses = []

    def _stage_converged(self) -> bool:
        cfg = self.config
        losses = self.state.stage_losses
        if len(losses) <= cfg.convergence_patience:
            return False
        window = losses[-(cfg.convergence_patience + 1):]
        baseline = window[0]
        improvement = baseline - min(window[1:])
        return improvement / max(abs(baseline), 1e-12) < cfg.convergence_threshold

    def curriculum_step(self) -> None:
        """Advance the schedule after an epoch: next module, then one lr decay."""
        cfg = self.config
        cap = cfg.max_epochs_per_stage
        due = self._stage_converged() or (cap is not None and self.state.stage_epochs >= cap)
        if not due:
            return
        if self.state.stage + 1 < len(self.plan):
            self._activate_stage(self.state.stage + 1)
        elif not self.state.lr_decayed:
            for group in self.optimizer.param_groups:
                if cfg.lr_decay_target == "all" or group["name"] == "predictor":
                    group["lr"] *= cfg.lr_decay_factor
            self.state.lr_decayed = True
            self.state.stage_epochs = 0
            self.state.stage_losses = []
        else:
            self.state.complete = True

    # -- optimization --------------------------------------------------------

    def _sprites_frozen(self) -> bool:
        return self.state.epoch < self.config.freeze_sprites_epochs

    def _set_sprite_grad(self, enabled: bool) -> None:
        self.model.sprite_bank.requires_grad_(enabled)

    def train_epoch(self) -> TrainState:
        cfg = self.config
        model = self.model
        model.train()
        self._set_sprite_grad(not self._sprites_frozen())
        n = len(self.dataset)
        order = torch.randperm(n, generator=self.generator)
        scale = 1.0
        if cfg.loss_reduction == "mean":
            h, w = cfg.canvas
            scale = 1.0 / (3 * h * w)

        total_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = self.dataset.to_tensor(idx.numpy()).to(self.device)
            out = model(x, training=True, generator=self.generator)
            loss_vec = penalized_loss(x, out.delta, out.layers,
                                      out.indices.gt(0).sum(dim=1), cfg.sprite_penalty)
            loss = loss_vec.mean() * scale
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {self.state.epoch}, "
                    f"step {self.state.global_step}, stage {self.state.stage}, "
                    f"lrs {[g['lr'] for g in self.optimizer.param_groups]}")
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            with torch.no_grad():
                self._usage_counts += torch.bincount(
                    out.indices.flatten().cpu(), minlength=cfg.n_sprites + 1)
                self._usage_total += out.indices.numel()
            total_loss += float(loss_vec.mean()) * scale
            n_batches += 1
            self.state.global_step += 1

        epoch_loss = total_loss / max(n_batches, 1)
        self.state.last_loss = epoch_loss
        self.state.stage_losses.append(epoch_loss)
        self.state.stage_epochs += 1
        self.state.epoch += 1

        usage = self._usage_fractions()
        self.state.usage = usage.tolist()
        events = self._maybe_reassign(usage)
        self.curriculum_step()
        self._log_epoch(epoch_loss, events)
        return self.state

    def _usage_fractions(self) -> torch.Tensor:
        if self._usage_total == 0:
            return torch.zeros(self.config.n_sprites)
        return (self._usage_counts[1:].double() / self._usage_total).float()

    def _maybe_reassign(self, usage: torch.Tensor) -> list[tuple[int, int]]:
        events: list[tuple[int, int]] = []
        if not self._sprites_frozen() and self.config.n_sprites > 1:
            events = reassign_dead_sprites(self.model.sprite_bank, usage,
                                           generator=self.generator)
            for dead, source in events:
                self.model.predictor.copy_sprite_head_block(dead, source,
                                                            generator=self.generator)
        self._usage_counts.zero_()
        self._usage_total = 0
        return events

    def _log_epoch(self, loss: float, events) -> None:
        record = {
            "step": self.state.global_step,
            "epoch": self.state.epoch,
            "stage": self.state.stage,
            "loss": loss,
            "lr": [g["lr"] for g in self.optimizer.param_groups],
            "sprite_usage": [round(u, 6) for u in self.state.usage],
            "reassigned": list(events),
            "lr_decayed": self.state.lr_decayed,
        }
        self.history.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "train_log.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
        if self.verbose:
            print(f"epoch {record['epoch']:4d} stage {record['stage']} "
                  f"loss {loss:.6g} lr {record['lr']}")

    def fit(self) -> TrainState:
        cfg = self.config
        while not self.state.complete and self.state.epoch < cfg.max_epochs:
            self.train_epoch()
            if (self.out_dir is not None and cfg.checkpoint_every > 0
                    and self.state.epoch % cfg.checkpoint_every == 0):
                self.save_checkpoint(self.out_dir / f"ckpt_{self.state.epoch:04d}.pt")
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "model.pt")
        return self.state

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "version": __version__,
            "config": self.config.to_dict(),
            "model_state": self.model.state_dict(),
            "curriculum": self.model.curriculum_state(),
            "optimizer_state": self.optimizer.state_dict(),
            "trainer_state": dataclasses.asdict(self.state),
            "generator_state": self.generator.get_state(),
        }, path)
        return path

    @classmethod
    def resume(cls, path: str | Path, dataset: SceneDataset,
               out_dir: str | Path | None = None, verbose: bool = False) -> "Trainer":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        config = TrainConfig.from_dict(payload["config"])
        trainer = cls(config, dataset, out_dir=out_dir, verbose=verbose)
        trainer.model.load_state_dict(payload["model_state"])
        trainer.model.set_curriculum_state(payload["curriculum"])
        trainer.optimizer.load_state_dict(payload["optimizer_state"])
        trainer.state = TrainState(**payload["trainer_state"])
        trainer.generator.set_state(payload["generator_state"])
        return trainer


def load_model(path: str | Path) -> tuple[SceneModel, TrainConfig]:
    """Load a checkpoint for inference/evaluation."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    model = SceneModel(config)
    model.load_state_dict(payload["model_state"])
    model.set_curriculum_state(payload["curriculum"])
    model.eval()
    return model, config
