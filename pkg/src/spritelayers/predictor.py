"""Networks predicting transformation parameters and the occlusion matrix.

A shared convolutional residual backbone feeds separate MLP heads (two
hidden layers of 128 units each): one per layer for the layer-wide
transform parameters, one per layer for the per-sprite parameter blocks
(when sprite-specific transforms are configured), one for the background
transform, and one for the occlusion matrix. Every head's final linear
layer is zero-initialized, so at step 0 all transforms are exactly the
identity and all occlusion entries sit at sigmoid(0) = 0.5.

Backbone variants follow the input size: a small residual net with 64
features for images under 65x65, a larger one with 512 features
otherwise. With more than 3 object layers the global average pooling is
replaced by adaptive pooling (4x4 small, 2x2 large) to enlarge the
representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class BackboneSpec:
    variant: str  # "small" | "large"
    feature_dim: int
    pooled_hw: int

    @staticmethod
    def for_input(image_hw: tuple[int, int], n_obj_layers: int,
                  variant: str | None = None) -> "BackboneSpec":
        h, w = image_hw
        if variant is None:
            variant = "small" if (h < 65 and w < 65) else "large"
        if variant == "small":
            pooled = 1 if n_obj_layers <= 3 else 4
            return BackboneSpec("small", 64, pooled)
        pooled = 1 if n_obj_layers <= 3 else 2
        return BackboneSpec("large", 512, pooled)

    @property
    def flat_dim(self) -> int:
        return self.feature_dim * self.pooled_hw * self.pooled_hw


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        res = x if self.skip is None else self.skip(x)
        return F.relu(out + res)


class ResidualBackbone(nn.Module):
    """Stacked residual stages ending in adaptive average pooling."""

    def __init__(self, widths: list[int], blocks_per_stage: int, pooled_hw: int,
                 stem_width: int | None = None, stem_stride: int = 1):
        super().__init__()
        stem_width = stem_width or widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_width, 3, stride=stem_stride, padding=1, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(inplace=True),
        )
        stages = []
        c_in = stem_width
        for i, width in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if (b == 0 and i > 0) else 1
                stages.append(ResidualBlock(c_in, width, stride))
                c_in = width
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(pooled_hw)
        self.out_dim = widths[-1] * pooled_hw * pooled_hw

    def forward(self, x: Tensor) -> Tensor:
        x = self.stages(self.stem(x))
        return self.pool(x).flatten(1)


def make_backbone(spec: BackboneSpec, blocks_per_stage: int = 2) -> ResidualBackbone:
    if spec.variant == "small":
        return ResidualBackbone([16, 32, 64], blocks_per_stage, spec.pooled_hw)
    return ResidualBackbone([64, 128, 256, 512], blocks_per_stage, spec.pooled_hw,
                            stem_width=64, stem_stride=2)


class Head(nn.Module):
    """MLP with two 128-unit hidden layers; final layer zero-initialized."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


@dataclass
class PredictorOutput:
    layer_params: Tensor          # [B, L, lay_dim]
    sprite_params: Tensor | None  # [B, L, K, spr_dim]
    background_params: Tensor | None  # [B, bkg_dim]
    occlusion_raw: Tensor         # [B, L * (L - 1) / 2]


class ParameterPredictor(nn.Module):
    """Shared backbone plus per-group heads.

    ``lay_dim``/``spr_dim``/``bkg_dim`` are the *full* sequence dimensions;
    curriculum masking happens downstream in the transform sequences, so
    head shapes never change during training.
    """

    def __init__(self, image_hw: tuple[int, int], n_obj_layers: int, n_sprites: int,
                 lay_dim: int, spr_dim: int = 0, bkg_dim: int = 0,
                 background: bool = False, blocks_per_stage: int = 2,
                 backbone_variant: str | None = None):
        super().__init__()
        self.image_hw = tuple(image_hw)
        self.n_obj_layers = n_obj_layers
        self.n_sprites = n_sprites
        self.lay_dim = lay_dim
        self.spr_dim = spr_dim
        self.bkg_dim = bkg_dim
        self.background = background
        self.spec = BackboneSpec.for_input(image_hw, n_obj_layers, backbone_variant)
        self.backbone = make_backbone(self.spec, blocks_per_stage)
        feat = self.spec.flat_dim
        if lay_dim > 0:
            self.layer_heads = nn.ModuleList(
                [Head(feat, lay_dim) for _ in range(n_obj_layers)])
        else:
            self.layer_heads = None
        if spr_dim > 0:
            self.sprite_heads = nn.ModuleList(
                [Head(feat, n_sprites * spr_dim) for _ in range(n_obj_layers)])
        else:
            self.sprite_heads = None
        self.background_head = Head(feat, bkg_dim) if (background and bkg_dim > 0) else None
        n_pairs = n_obj_layers * (n_obj_layers - 1) // 2
        self.occlusion_head = Head(feat, n_pairs) if n_pairs > 0 else None

    def forward(self, x: Tensor) -> PredictorOutput:
        if x.shape[-2:] != self.image_hw:
            raise ValueError(
                f"predictor built for {self.image_hw} images, got {tuple(x.shape[-2:])}")
        feat = self.backbone(x)
        b = feat.shape[0]
        if self.layer_heads is not None:
            layer = torch.stack([h(feat) for h in self.layer_heads], dim=1)
        else:
            layer = torch.zeros(b, self.n_obj_layers, 0, device=x.device, dtype=x.dtype)
        sprite = None
        if self.sprite_heads is not None:
            sprite = torch.stack([h(feat) for h in self.sprite_heads], dim=1)
            sprite = sprite.reshape(b, self.n_obj_layers, self.n_sprites, self.spr_dim)
        bkg = self.background_head(feat) if self.background_head is not None else None
        if self.occlusion_head is not None:
            occ = self.occlusion_head(feat)
        else:
            occ = torch.zeros(b, 0, device=x.device, dtype=x.dtype)
        return PredictorOutput(layer, sprite, bkg, occ)

    @torch.no_grad()
    def copy_sprite_head_block(self, dead: int, source: int, noise_std: float = 0.01,
                               generator: torch.Generator | None = None) -> None:
        """Copy the final-layer rows for sprite ``source`` onto ``dead`` (1-based)."""
        if self.sprite_heads is None:
            return
        for head in self.sprite_heads:
            final: nn.Linear = head.net[-1]
            for t in (final.weight, final.bias):
                rows = t.reshape(self.n_sprites, self.spr_dim, *t.shape[1:])
                jitter = torch.randn(rows[source - 1].shape, generator=generator,
                                     dtype=t.dtype) * noise_std
                rows[dead - 1] = rows[source - 1] + jitter


def build_occlusion(occlusion_raw: Tensor, n_obj_layers: int,
                    background: bool = False) -> Tensor:
    """Assemble the full occlusion matrix from raw pre-sigmoid values.

    The raw vector fills the strict lower triangle row-major after a
    sigmoid; the upper triangle is the antisymmetric complement
    (delta[i, j] = 1 - delta[j, i]) and the diagonal is zero. When a
    background layer is modeled it is prepended as layer 0 with fixed
    relations: every object layer occludes it and it occludes nothing.
    """
    n_pairs = n_obj_layers * (n_obj_layers - 1) // 2
    if occlusion_raw.shape[-1] != n_pairs:
        raise ValueError(
            f"expected {n_pairs} occlusion values for {n_obj_layers} layers, "
            f"got {occlusion_raw.shape[-1]}")
    batch = occlusion_raw.shape[:-1]
    vals = torch.sigmoid(occlusion_raw)
    delta = torch.zeros(*batch, n_obj_layers, n_obj_layers,
                        dtype=occlusion_raw.dtype, device=occlusion_raw.device)
    rows, cols = torch.tril_indices(n_obj_layers, n_obj_layers, offset=-1,
                                    device=occlusion_raw.device)
    delta[..., rows, cols] = vals
    delta[..., cols, rows] = 1 - vals
    if not background:
        return delta
    full = torch.zeros(*batch, n_obj_layers + 1, n_obj_layers + 1,
                       dtype=delta.dtype, device=delta.device)
    full[..., 1:, 1:] = delta
    full[..., 1:, 0] = 1.0  # every object layer hides the background
    return full


def binarize_delta(delta: Tensor) -> Tensor:
    """Inference-time thresholding: delta_ij -> 1[delta_ij > 0.5]."""
    return (delta > 0.5).to(delta.dtype)
