"""Learnable sprite and background prototype banks.

A sprite is a 4-channel prototype image: RGB appearance plus an alpha
mask. Index 0 is reserved for the empty sprite (all zeros, never trained);
the bank stores only the K real sprites. Background prototypes are plain
RGB images whose alpha is implicitly 1 everywhere.

Raw parameters are unconstrained; rendering squashes them through
``softclip`` so values stay near [0, 1] without ever killing gradients.
During training, uniform noise in [-0.4, 0.4] is added to the raw masks
before the softclip, which pushes the learned masks toward binary values.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

SOFTCLIP_SLOPE = 0.01
MASK_NOISE = 0.4


def softclip(x: Tensor) -> Tensor:
    """Identity on [0, 1], affine with slope 0.01 outside; never saturates."""
    inner = x.clamp(0.0, 1.0)
    return inner + SOFTCLIP_SLOPE * (x - inner)


def gaussian_mask(h: int, w: int, peak: float = 0.9, floor: float = 0.05) -> Tensor:
    """Centered isotropic Gaussian bump, sigma = 0.25 * min(h, w)."""
    sigma = 0.25 * min(h, w)
    ys = torch.arange(h, dtype=torch.float32) - (h - 1) / 2
    xs = torch.arange(w, dtype=torch.float32) - (w - 1) / 2
    r2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return floor + (peak - floor) * torch.exp(-r2 / (2 * sigma**2))


class SpriteBank(nn.Module):
    """K learnable sprites; the empty sprite s_0 lives outside the bank.

    ``render`` returns the K real sprites; callers represent index 0 with a
    zero layer, which composes as an exact no-op (alpha 0 contributes
    nothing and occludes nothing).
    """

    def __init__(self, n_sprites: int, size: tuple[int, int]):
        super().__init__()
        if n_sprites < 1:
            raise ValueError("need at least one sprite")
        h, w = size
        self.n_sprites = n_sprites
        self.size = (h, w)
        self.appearance = nn.Parameter(torch.full((n_sprites, 3, h, w), 0.5))
        mask = gaussian_mask(h, w).expand(n_sprites, 1, h, w).clone()
        self.mask = nn.Parameter(mask)

    def render(self, training: bool = False,
               generator: torch.Generator | None = None) -> Tensor:
        """Rendered sprites [K, 4, h, w]; mask noise only when training."""
        rgb = softclip(self.appearance)
        raw = self.mask
        if training:
            noise = (torch.rand(raw.shape, generator=generator, device=raw.device,
                                dtype=raw.dtype) * 2 - 1) * MASK_NOISE
            raw = raw + noise
        alpha = softclip(raw)
        return torch.cat([rgb, alpha], dim=1)

    def render_sprite(self, k: int, training: bool = False,
                      generator: torch.Generator | None = None) -> Tensor:
        """Single sprite [4, h, w]; k = 0 is the constant empty sprite."""
        if not 0 <= k <= self.n_sprites:
            raise IndexError(f"sprite index {k} out of range [0, {self.n_sprites}]")
        if k == 0:
            h, w = self.size
            return torch.zeros(4, h, w, dtype=self.appearance.dtype,
                               device=self.appearance.device)
        return self.render(training, generator)[k - 1]

    @torch.no_grad()
    def reassign_from(self, dead: int, source: int, noise_std: float = 0.01,
                      generator: torch.Generator | None = None) -> None:
        """Re-initialize sprite ``dead`` as a perturbed copy of ``source`` (1-based)."""
        for p in (self.appearance, self.mask):
            jitter = torch.randn(p[source - 1].shape, generator=generator,
                                 device=p.device, dtype=p.dtype) * noise_std
            p[dead - 1] = p[source - 1] + jitter


class BackgroundBank(nn.Module):
    """K' learnable background prototypes; alpha is implicitly 1."""

    def __init__(self, n_prototypes: int, size: tuple[int, int]):
        super().__init__()
        h, w = size
        self.n_prototypes = n_prototypes
        self.size = (h, w)
        self.appearance = nn.Parameter(torch.full((n_prototypes, 3, h, w), 0.5))

    def render(self) -> Tensor:
        """Rendered backgrounds [K', 3, h, w]; no noise is injected."""
        return softclip(self.appearance)

    @torch.no_grad()
    def init_from_mean(self, mean_image: Tensor,
                       generator: torch.Generator | None = None) -> None:
        """Set every prototype to the dataset mean image (tiny jitter breaks
        symmetry when K' > 1)."""
        if mean_image.shape != self.appearance.shape[1:]:
            raise ValueError(
                f"mean image shape {tuple(mean_image.shape)} does not match "
                f"background size {tuple(self.appearance.shape[1:])}"
            )
        self.appearance.copy_(mean_image.expand_as(self.appearance))
        if self.n_prototypes > 1:
            jitter = torch.randn(self.appearance.shape, generator=generator,
                                 dtype=self.appearance.dtype) * 0.01
            self.appearance.add_(jitter)


def dead_sprites(usage_fraction: Tensor, n_sprites: int) -> list[int]:
    """1-based indices of sprites used in less than (20 / K)% of image layers.

    ``usage_fraction[k - 1]`` is the fraction of image layers that selected
    sprite k over the last window.
    """
    threshold = 0.2 / n_sprites
    return [k + 1 for k in range(n_sprites) if usage_fraction[k] < threshold]


def reassign_dead_sprites(bank: SpriteBank, usage_fraction: Tensor,
                          generator: torch.Generator | None = None,
                          noise_std: float = 0.01) -> list[tuple[int, int]]:
    """Copy the most-used sprite over every dead one; returns (dead, source) events."""
    dead = dead_sprites(usage_fraction, bank.n_sprites)
    if not dead:
        return []
    source = int(torch.argmax(usage_fraction).item()) + 1
    events = []
    for k in dead:
        if k == source:
            continue
        bank.reassign_from(k, source, noise_std=noise_std, generator=generator)
        events.append((k, source))
    return events
