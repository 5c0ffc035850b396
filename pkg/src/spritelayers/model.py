"""The full learnable scene model.

Holds the sprite bank, background prototypes, transform sequences and the
parameter predictor, and implements the per-image pipeline: predict
parameters, render the (K+1) x L candidate grid, select sprite indices,
and compose the reconstruction. Layer slot 0 is the background (farthest)
when one is modeled.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import selection as sel
from .compositing import (compose_closed_form, nothing_weight, strict_order_delta,
                          visible_masks)
from .config import TrainConfig
from .predictor import ParameterPredictor, PredictorOutput, binarize_delta, build_occlusion
from .sprites import BackgroundBank, SpriteBank
from .transforms import TransformSequence, make_sequence


@dataclass
class SceneOutputs:
    """Everything the training step and the metrics need for one batch."""

    composite: Tensor            # [B, 3, H, W] reconstruction (differentiable)
    layers: Tensor               # [B, L_total, 4, H, W] chosen stack (differentiable)
    delta: Tensor                # [B, L_total, L_total]
    indices: Tensor              # [B, L] sprite index per object layer (0 = empty)
    background_indices: Tensor | None
    selection_loss: Tensor       # [B] penalized loss from the selector
    grid: Tensor                 # [B, L, K+1, 4, H, W] candidate layers
    prediction: PredictorOutput


class SceneModel(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        h, w = config.canvas
        self.lay_seq = make_sequence(config.layer_transforms)
        self.spr_seq = make_sequence(config.sprite_transforms)
        self.bkg_seq = make_sequence(config.background_transforms)
        self.sprite_bank = SpriteBank(config.n_sprites, (h, w))
        self.background_bank = (BackgroundBank(config.n_backgrounds, (h, w))
                                if config.background else None)
        self.predictor = ParameterPredictor(
            (h, w), config.n_obj_layers, config.n_sprites,
            lay_dim=self.lay_seq.total_dim,
            spr_dim=self.spr_seq.total_dim,
            bkg_dim=self.bkg_seq.total_dim,
            background=config.background,
            blocks_per_stage=config.backbone_blocks,
            backbone_variant=config.backbone_variant,
        )

    @property
    def n_total_layers(self) -> int:
        return self.config.n_obj_layers + (1 if self.config.background else 0)

    @property
    def sequences(self) -> dict[str, TransformSequence]:
        return {"lay": self.lay_seq, "spr": self.spr_seq, "bkg": self.bkg_seq}

    def curriculum_state(self) -> dict[str, int]:
        return {name: seq.n_active for name, seq in self.sequences.items()}

    def set_curriculum_state(self, state: dict[str, int]) -> None:
        for name, n in state.items():
            self.sequences[name].n_active = n

    def render_candidates(self, x: Tensor, training: bool = False,
                          generator: torch.Generator | None = None
                          ) -> tuple[Tensor, Tensor | None, Tensor, PredictorOutput]:
        """Predict parameters and render every candidate object layer.

        Returns (grid [B, L, K+1, 4, H, W], backgrounds [B, K', 4, H, W] or
        None, delta [B, L_total, L_total], raw prediction).
        """
        cfg = self.config
        b = x.shape[0]
        n_layers, n_sprites = cfg.n_obj_layers, cfg.n_sprites
        h, w = cfg.canvas
        pred = self.predictor(x)

        sprites = self.sprite_bank.render(training=training, generator=generator)
        imgs = sprites.expand(b, n_layers, n_sprites, 4, *sprites.shape[-2:])
        if self.spr_seq.modules:
            imgs = self.spr_seq.apply(pred.sprite_params, imgs, out_hw=(h, w))
        if self.lay_seq.modules:
            lay_params = pred.layer_params.unsqueeze(2)  # broadcast over sprites
            imgs = self.lay_seq.apply(lay_params, imgs, out_hw=(h, w))
        imgs = imgs.expand(b, n_layers, n_sprites, 4, h, w)
        empty = torch.zeros(b, n_layers, 1, 4, h, w, dtype=imgs.dtype, device=imgs.device)
        grid = torch.cat([empty, imgs], dim=2)

        backgrounds = None
        if self.background_bank is not None:
            bg_rgb = self.background_bank.render().expand(b, cfg.n_backgrounds, 3, h, w)
            if self.bkg_seq.modules:
                bg_params = pred.background_params.unsqueeze(1)  # shared across prototypes
                bg_rgb = self.bkg_seq.apply(bg_params, bg_rgb, out_hw=(h, w))
            ones = torch.ones(b, cfg.n_backgrounds, 1, h, w, dtype=bg_rgb.dtype,
                              device=bg_rgb.device)
            backgrounds = torch.cat([bg_rgb, ones], dim=2)

        if cfg.predict_occlusion:
            delta = build_occlusion(pred.occlusion_raw, n_layers, cfg.background)
        else:
            delta = strict_order_delta(self.n_total_layers, dtype=x.dtype,
                                       device=x.device).expand(b, -1, -1)
        return grid, backgrounds, delta, pred

    def select(self, x: Tensor, grid: Tensor, delta: Tensor,
               backgrounds: Tensor | None) -> sel.Selection:
        cfg = self.config
        penalty = cfg.sprite_penalty  # selection always compares on the sum scale
        n_comb = (cfg.n_sprites + 1) ** cfg.n_obj_layers
        if backgrounds is not None:
            n_comb *= backgrounds.shape[1]
        mode = cfg.selection
        if mode == "auto":
            mode = "exhaustive" if n_comb <= cfg.exhaustive_budget else "greedy"
        if mode == "exhaustive":
            return sel.select_exhaustive(x, grid.detach(), delta.detach(), penalty,
                                         budget=cfg.exhaustive_budget,
                                         background=None if backgrounds is None
                                         else backgrounds.detach())
        return sel.select_greedy(x, grid.detach(), delta.detach(), penalty,
                                 n_steps=cfg.greedy_steps,
                                 background=None if backgrounds is None
                                 else backgrounds.detach())

    def forward(self, x: Tensor, training: bool | None = None,
                generator: torch.Generator | None = None) -> SceneOutputs:
        training = self.training if training is None else training
        grid, backgrounds, delta, pred = self.render_candidates(x, training, generator)
        choice = self.select(x, grid, delta, backgrounds)
        layers = sel.gather_chosen(grid, choice.indices, backgrounds,
                                   choice.background_indices)
        composite = compose_closed_form(layers, delta)
        return SceneOutputs(composite, layers, delta, choice.indices,
                            choice.background_indices, choice.loss, grid, pred)

    @torch.no_grad()
    def decompose(self, x: Tensor) -> dict:
        """Inference: no mask noise, binarized occlusion, label maps.

        Returns a dict with the reconstruction, chosen layers, occlusion
        matrix, sprite indices, and per-pixel instance / semantic labels
        (0 is background in both).
        """
        was_training = self.training
        self.eval()
        try:
            grid, backgrounds, delta, pred = self.render_candidates(x, training=False)
            delta = binarize_delta(delta)
            choice = self.select(x, grid, delta, backgrounds)
            layers = sel.gather_chosen(grid, choice.indices, backgrounds,
                                       choice.background_indices)
            composite = compose_closed_form(layers, delta)
            instance, semantic = self.label_maps(layers, delta, choice.indices)
            return {
                "composite": composite,
                "layers": layers,
                "delta": delta,
                "indices": choice.indices,
                "background_indices": choice.background_indices,
                "selection_loss": choice.loss,
                "instance": instance,
                "semantic": semantic,
                "prediction": pred,
            }
        finally:
            self.train(was_training)

    def label_maps(self, layers: Tensor, delta: Tensor,
                   indices: Tensor) -> tuple[Tensor, Tensor]:
        """Per-pixel instance and semantic labels from a chosen stack.

        Instance label i in 1..L is the visible object layer (its slot
        order), 0 is background (the background layer when modeled, plus
        any pixel covered by nothing). The semantic label is the sprite
        index of the visible layer, 0 for background.
        """
        cfg = self.config
        offset = 1 if cfg.background else 0
        weights = visible_masks(layers, delta)  # [B, L_total, 1, H, W]
        obj_w = weights[:, offset:]
        if cfg.background:
            bg_w = weights[:, :1]
        else:
            bg_w = nothing_weight(layers).unsqueeze(1)
        stacked = torch.cat([bg_w, obj_w], dim=1).squeeze(2)  # [B, 1+L, H, W]
        # ties go to the first index, i.e. background; empty layers have zero
        # weight everywhere, so they can never win
        instance = stacked.argmax(dim=1)
        sprite_of_layer = torch.cat(
            [torch.zeros_like(indices[:, :1]), indices], dim=1)  # label 0 -> sprite 0
        semantic = sprite_of_layer.gather(1, instance.flatten(1)).reshape_as(instance)
        return instance, semantic

    @torch.no_grad()
    def render_reconstruction(self, x: Tensor) -> Tensor:
        return self.decompose(x)["composite"]
