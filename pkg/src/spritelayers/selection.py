"""Per-layer sprite selection minimizing the penalized reconstruction loss.

Given a candidate grid of (K+1) transformed sprites per layer (candidate 0
is the empty layer), selection picks one index per layer minimizing

    penalty * #non-empty  +  || x - composite ||^2   (sum over pixels, channels)

Exhaustive search enumerates all (K+1)^L combinations and is refused above
a budget; the greedy variant sweeps the layers in order T times, updating
one layer at a time with all others fixed, which costs T * (K+1) * L
composite evaluations. Ties prefer the empty sprite, then the smallest
index tuple. Indices are discrete: no gradient flows through the argmin,
only through the reconstruction of the chosen combination.

When background prototypes are supplied they occupy slot 0 of the stack,
are always present (never penalized), and are swept like a layer when
there is more than one prototype.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
from torch import Tensor

from .compositing import compose_closed_form


class SelectionBudgetError(ValueError):
    """Raised when exhaustive enumeration would exceed the configured budget."""


@dataclass
class Selection:
    indices: Tensor            # [B, L] chosen sprite index per object layer
    background_indices: Tensor | None  # [B] chosen background prototype
    loss: Tensor               # [B] penalized loss of the chosen combination
    layers: Tensor             # [B, L_total, 4, H, W] chosen stack (detached)

    @property
    def n_nonempty(self) -> Tensor:
        return (self.indices > 0).sum(dim=1)


def squared_error(x: Tensor, composite: Tensor) -> Tensor:
    """Sum of squared per-pixel, per-channel differences over trailing dims."""
    return ((x - composite) ** 2).sum(dim=(-3, -2, -1))


def penalized_loss(x: Tensor, delta: Tensor, layers: Tensor, n_nonempty: Tensor | int,
                   penalty: float) -> Tensor:
    """penalty * #non-empty sprites + squared reconstruction error."""
    err = squared_error(x, compose_closed_form(layers, delta))
    if isinstance(n_nonempty, Tensor):
        n_nonempty = n_nonempty.to(err.dtype)
    return err + penalty * n_nonempty


def gather_chosen(grid: Tensor, indices: Tensor,
                  background: Tensor | None = None,
                  background_indices: Tensor | None = None) -> Tensor:
    """Assemble the chosen layer stack from the candidate grid (differentiable).

    grid: [B, L, K+1, 4, H, W]; indices: [B, L]. Returns
    [B, L(+1), 4, H, W] with the background, when given, in slot 0.
    """
    b, n_layers, _, c, h, w = grid.shape
    idx = indices.reshape(b, n_layers, 1, 1, 1, 1).expand(b, n_layers, 1, c, h, w)
    chosen = grid.gather(2, idx).squeeze(2)
    if background is None:
        return chosen
    if background_indices is None:
        background_indices = torch.zeros(b, dtype=torch.long, device=grid.device)
    bidx = background_indices.reshape(b, 1, 1, 1, 1).expand(b, 1, c, h, w)
    bg = background.gather(1, bidx)
    return torch.cat([bg, chosen], dim=1)


def _sweep_costs(x: Tensor, state: Tensor, candidates: Tensor, slot: int,
                 delta: Tensor) -> Tensor:
    """Cost of substituting each candidate into ``slot`` of the current stack."""
    n_cand = candidates.shape[1]
    stack = state.unsqueeze(1).repeat(1, n_cand, 1, 1, 1, 1)
    stack[:, :, slot] = candidates
    composite = compose_closed_form(stack, delta.unsqueeze(1))
    return squared_error(x.unsqueeze(1), composite)


@torch.no_grad()
def select_greedy(x: Tensor, grid: Tensor, delta: Tensor, penalty: float,
                  n_steps: int = 1, background: Tensor | None = None) -> Selection:
    """Greedy coordinate descent over per-layer sprite indices.

    All layers start empty; each of the ``n_steps`` sweeps updates layers
    1..L in order, choosing the argmin with the others held fixed. The
    incumbent is always among the candidates, so the loss never increases.
    Stops early once a sweep changes nothing (a later sweep would repeat
    the same argument and choose identically).
    """
    if n_steps < 1:
        raise ValueError("greedy selection needs at least one sweep")
    b, n_layers, n_cand = grid.shape[:3]
    offset = 0 if background is None else 1
    n_total = n_layers + offset
    state = torch.zeros(b, n_total, *grid.shape[3:], dtype=grid.dtype, device=grid.device)
    indices = torch.zeros(b, n_layers, dtype=torch.long, device=grid.device)
    bg_indices = None
    if background is not None:
        bg_indices = torch.zeros(b, dtype=torch.long, device=grid.device)
        state[:, 0] = background[:, 0]
    cand_penalty = torch.full((n_cand,), penalty, dtype=grid.dtype, device=grid.device)
    cand_penalty[0] = 0.0
    batch_idx = torch.arange(b, device=grid.device)

    for _ in range(n_steps):
        changed = False
        if background is not None and background.shape[1] > 1:
            costs = _sweep_costs(x, state, background, 0, delta)
            new_bg = costs.argmin(dim=1)
            changed |= bool((new_bg != bg_indices).any())
            bg_indices = new_bg
            state[:, 0] = background[batch_idx, bg_indices]
        for l in range(n_layers):
            costs = _sweep_costs(x, state, grid[:, l], offset + l, delta)
            costs = costs + cand_penalty
            new_k = costs.argmin(dim=1)  # first minimum: empty, then ascending
            changed |= bool((new_k != indices[:, l]).any())
            indices[:, l] = new_k
            state[:, offset + l] = grid[batch_idx, l, new_k]
        if not changed:
            break

    loss = penalized_loss(x, delta, state, (indices > 0).sum(dim=1), penalty)
    return Selection(indices, bg_indices, loss, state)


@torch.no_grad()
def select_exhaustive(x: Tensor, grid: Tensor, delta: Tensor, penalty: float,
                      budget: int = 4096, background: Tensor | None = None,
                      chunk_size: int = 64) -> Selection:
    """Globally optimal selection by enumerating every index combination.

    Refuses (SelectionBudgetError) when the combination count exceeds
    ``budget``. Ties are broken toward fewer non-empty sprites, then the
    lexicographically smallest index tuple.
    """
    b, n_layers, n_cand = grid.shape[:3]
    n_bg = background.shape[1] if background is not None else 1
    n_comb = (n_cand ** n_layers) * n_bg
    if n_comb > budget:
        raise SelectionBudgetError(
            f"{n_comb} combinations exceed the exhaustive budget of {budget}")

    axes = [range(n_bg)] if background is not None else [range(1)]
    axes += [range(n_cand)] * n_layers
    combos = torch.tensor(list(itertools.product(*axes)), device=grid.device)
    obj_combos = combos[:, 1:]
    counts = (obj_combos > 0).sum(dim=1)

    costs = torch.empty(b, n_comb, dtype=grid.dtype, device=grid.device)
    layer_pos = torch.arange(n_layers, device=grid.device)
    for start in range(0, n_comb, chunk_size):
        chunk = combos[start:start + chunk_size]
        stack = grid[:, layer_pos.unsqueeze(0), chunk[:, 1:]]  # [B, n, L, 4, H, W]
        if background is not None:
            bg = background[:, chunk[:, 0]].unsqueeze(2)
            stack = torch.cat([bg, stack], dim=2)
        composite = compose_closed_form(stack, delta.unsqueeze(1))
        costs[:, start:start + chunk.shape[0]] = squared_error(x.unsqueeze(1), composite)
    costs = costs + penalty * counts.to(costs.dtype)

    best = costs.min(dim=1, keepdim=True).values
    rank = counts * n_comb + torch.arange(n_comb, device=grid.device)
    masked = torch.where(costs == best, rank.unsqueeze(0), torch.full_like(rank, 2 * n_comb * n_layers).unsqueeze(0))
    choice = masked.argmin(dim=1)

    indices = obj_combos[choice]
    bg_indices = combos[choice, 0] if background is not None else None
    layers = gather_chosen(grid, indices, background, bg_indices)
    loss = penalized_loss(x, delta, layers, (indices > 0).sum(dim=1), penalty)
    return Selection(indices, bg_indices, loss, layers)
