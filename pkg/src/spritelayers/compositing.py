"""Layered image formation.

An object layer is a 4-channel image: RGB appearance plus an alpha
(transparency) channel. A stack of L layers is blended into a single RGB
image, either recursively back-to-front or in closed form weighted by an
L x L occlusion matrix ``delta``, where ``delta[j, l] = 1`` means layer j
hides layer l wherever both are opaque.

Conventions
-----------
* Layers are channels-first tensors of shape ``[..., L, 4, H, W]`` with
  arbitrary leading batch dimensions; channel 3 is alpha.
* ``delta`` has shape ``[..., L, L]``, zero diagonal, off-diagonal entries
  in [0, 1] with ``delta[i, j] = 1 - delta[j, i]``.
* In the recursive form, index 0 is the farthest layer and index L-1 the
  frontmost. The equivalent occlusion matrix is ``strict_order_delta``.

The closed form is the canonical differentiable path (it accepts soft
occlusion values); the recursive form is kept as an oracle and for
generators that build scenes with a known depth order.
"""

from __future__ import annotations

import torch
from torch import Tensor


def split_layers(layers: Tensor) -> tuple[Tensor, Tensor]:
    """Split ``[..., 4, H, W]`` into (rgb ``[..., 3, H, W]``, alpha ``[..., 1, H, W]``)."""
    if layers.shape[-3] != 4:
        raise ValueError(f"expected 4 channels (RGB + alpha), got {layers.shape[-3]}")
    return layers[..., :3, :, :], layers[..., 3:, :, :]


def strict_order_delta(n_layers: int, dtype=None, device=None) -> Tensor:
    """Occlusion matrix of a plain depth stack: delta[j, l] = 1 iff j > l."""
    idx = torch.arange(n_layers, device=device)
    delta = idx[:, None] > idx[None, :]
    return delta.to(dtype if dtype is not None else torch.get_default_dtype())


def validate_delta(delta: Tensor, n_layers: int, atol: float = 1e-6) -> None:
    """Raise ValueError unless ``delta`` is a valid occlusion matrix."""
    if delta.shape[-2:] != (n_layers, n_layers):
        raise ValueError(f"delta must be [..., {n_layers}, {n_layers}], got {tuple(delta.shape)}")
    diag = delta.diagonal(dim1=-2, dim2=-1)
    if diag.abs().max() > atol:
        raise ValueError("delta diagonal must be zero")
    sym = delta + delta.transpose(-2, -1)
    off = ~torch.eye(n_layers, dtype=torch.bool, device=delta.device)
    if (sym[..., off] - 1).abs().max() > atol:
        raise ValueError("delta must satisfy delta[i,j] = 1 - delta[j,i] off the diagonal")
    if delta.min() < -atol or delta.max() > 1 + atol:
        raise ValueError("delta entries must lie in [0, 1]")


def compose_recursive(layers: Tensor) -> Tensor:
    """Back-to-front alpha blending over a black canvas.

    c_0 = 0 and c_l = alpha_l * rgb_l + (1 - alpha_l) * c_{l-1}; returns c_L.
    """
    rgb, alpha = split_layers(layers)
    n_layers = layers.shape[-4]
    composite = torch.zeros_like(rgb[..., 0, :, :, :])
    for l in range(n_layers):
        a = alpha[..., l, :, :, :]
        composite = a * rgb[..., l, :, :, :] + (1 - a) * composite
    return composite


def occlusion_weights(layers: Tensor, delta: Tensor) -> Tensor:
    """Per-layer occlusion attenuation: w_l = prod_j (1 - delta[j, l] * alpha_j).

    Returns ``[..., L, 1, H, W]``. w_l is 1 where nothing in front of layer l
    covers it and decays toward 0 where occluders are opaque.
    """
    _, alpha = split_layers(layers)
    n_layers = layers.shape[-4]
    if delta.shape[-2:] != (n_layers, n_layers):
        raise ValueError(
            f"delta shape {tuple(delta.shape[-2:])} does not match {n_layers} layers"
        )
    # factors[..., j, l, 1, H, W] = 1 - delta[j, l] * alpha_j
    factors = 1 - delta[..., :, :, None, None, None] * alpha[..., :, None, :, :, :]
    return factors.prod(dim=-5)


def compose_closed_form(layers: Tensor, delta: Tensor) -> Tensor:
    """Occlusion-matrix form of the layered composition.

    composite = sum_l w_l * alpha_l * rgb_l with w_l from
    :func:`occlusion_weights`. Differentiable in both ``layers`` and
    ``delta``; with ``strict_order_delta`` it equals :func:`compose_recursive`.
    """
    rgb, alpha = split_layers(layers)
    w = occlusion_weights(layers, delta)
    return (w * alpha * rgb).sum(dim=-4)


def visible_masks(layers: Tensor, delta: Tensor) -> Tensor:
    """Visibility weight of each layer at each pixel: w_l * alpha_l.

    Returns ``[..., L, 1, H, W]``. Together with :func:`nothing_weight`
    these account for every pixel; their argmax defines instance labels.
    """
    _, alpha = split_layers(layers)
    return occlusion_weights(layers, delta) * alpha


def nothing_weight(layers: Tensor) -> Tensor:
    """Residual weight of the empty canvas: prod_l (1 - alpha_l), shape ``[..., 1, H, W]``."""
    _, alpha = split_layers(layers)
    return (1 - alpha).prod(dim=-4)
