"""Parametric differentiable image transformations.

Each module kind maps a parameter vector and a source image to a warped or
recolored image on a target canvas. All kinds are parameterized as offsets
from the identity, so the zero vector is always the identity transform.

Kinds and parameter layouts
---------------------------
positioning (3)
    ``(tx, ty, log_s)`` in normalized coordinates; content moves by
    ``(tx, ty)`` and is scaled isotropically by ``exp(log_s)``.
similarity (4)
    ``(tx, ty, log_s, angle)``; like positioning plus rotation by
    ``angle`` radians.
affine (6)
    Row-major offsets to the identity 2x3 sampling matrix
    (source = A @ target + b convention).
projective (8)
    Offsets to the first 8 entries of the identity 3x3 sampling
    homography; the last entry is fixed to 1.
tps (2 * G^2, G = 4)
    Sampling-coordinate displacements of a G x G control-point lattice,
    interpolated by a thin plate spline; all points at rest is the
    identity warp.
color (12)
    Offsets to a 3x3 channel-mixing matrix plus a 3-vector bias, applied
    to the RGB channels only; alpha passes through untouched.

Spatial kinds resample with bilinear interpolation onto the target grid
(normalized to [-1, 1], zero outside the source, so samples that fall off
the sprite read as transparent). Positioning and similarity use the
content-motion convention (positive tx moves content right); affine and
projective parameterize the sampling map directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

TPS_GRID = 4

PARAM_DIMS = {
    "positioning": 3,
    "similarity": 4,
    "affine": 6,
    "projective": 8,
    "tps": 2 * TPS_GRID * TPS_GRID,
    "color": 12,
}

SPATIAL_KINDS = ("positioning", "similarity", "affine", "projective", "tps")


def _check_params(kind: str, params: Tensor) -> None:
    dim = PARAM_DIMS[kind]
    if params.shape[-1] != dim:
        raise ValueError(f"{kind} expects {dim} parameters, got {params.shape[-1]}")
    if not torch.isfinite(params).all():
        raise ValueError(f"non-finite parameters passed to {kind} module")


def _grid_sample(image: Tensor, grid: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear sampling with zero padding; batch dims are flattened."""
    batch_shape = image.shape[:-3]
    c, h, w = image.shape[-3:]
    flat = image.reshape(-1, c, h, w)
    grid_flat = grid.reshape(-1, *out_hw, 2)
    out = F.grid_sample(
        flat, grid_flat, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return out.reshape(*batch_shape, c, *out_hw)


def _base_grid(out_hw: tuple[int, int], dtype, device) -> Tensor:
    """Normalized target pixel-center coordinates, shape [H, W, 2] (x, y)."""
    h, w = out_hw
    ys = (2 * torch.arange(h, dtype=dtype, device=device) + 1) / h - 1
    xs = (2 * torch.arange(w, dtype=dtype, device=device) + 1) / w - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def _positioning_grid(params: Tensor, out_hw: tuple[int, int]) -> Tensor:
    tx, ty, log_s = params[..., 0], params[..., 1], params[..., 2]
    inv_s = torch.exp(-log_s)
    base = _base_grid(out_hw, params.dtype, params.device)
    shift = torch.stack([tx, ty], dim=-1)
    return (base - shift[..., None, None, :]) * inv_s[..., None, None, None]


def _similarity_grid(params: Tensor, out_hw: tuple[int, int]) -> Tensor:
    tx, ty, log_s, ang = (params[..., i] for i in range(4))
    inv_s = torch.exp(-log_s)
    cos, sin = torch.cos(ang), torch.sin(ang)
    # source = R(-angle) @ (target - t) / s
    rot = torch.stack(
        [torch.stack([cos, sin], -1), torch.stack([-sin, cos], -1)], dim=-2
    )
    base = _base_grid(out_hw, params.dtype, params.device)
    shift = torch.stack([tx, ty], dim=-1)
    centered = base - shift[..., None, None, :]
    return torch.einsum("...ij,...hwj->...hwi", rot, centered) * inv_s[..., None, None, None]


def _affine_grid(params: Tensor, out_hw: tuple[int, int]) -> Tensor:
    eye = torch.tensor(
        [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=params.dtype, device=params.device
    )
    mat = (params + eye).reshape(*params.shape[:-1], 2, 3)
    base = _base_grid(out_hw, params.dtype, params.device)
    lin = torch.einsum("...ij,hwj->...hwi", mat[..., :2], base)
    return lin + mat[..., 2][..., None, None, :]


def _projective_grid(params: Tensor, out_hw: tuple[int, int]) -> Tensor:
    eye = torch.tensor(
        [1.0, 0, 0, 0, 1.0, 0, 0, 0], dtype=params.dtype, device=params.device
    )
    hom = torch.cat(
        [params + eye, torch.ones_like(params[..., :1])], dim=-1
    ).reshape(*params.shape[:-1], 3, 3)
    base = _base_grid(out_hw, params.dtype, params.device)
    ones = torch.ones_like(base[..., :1])
    coords = torch.cat([base, ones], dim=-1)
    mapped = torch.einsum("...ij,hwj->...hwi", hom, coords)
    return mapped[..., :2] / mapped[..., 2:3]


_TPS_CACHE: dict[tuple, Tensor] = {}


def _tps_basis(out_hw: tuple[int, int], dtype, device) -> Tensor:
    """Fixed linear map from control-point displacements to a dense field.

    With the source lattice fixed, the TPS system matrix is constant, so
    the dense displacement field is linear in the offsets: field = M @ d.
    Returns M with shape [H * W, G^2].
    """
    key = (out_hw, TPS_GRID, str(dtype), str(device))
    if key in _TPS_CACHE:
        return _TPS_CACHE[key]
    g = TPS_GRID
    lin = torch.linspace(-1, 1, g, dtype=torch.float64)
    cy, cx = torch.meshgrid(lin, lin, indexing="ij")
    ctrl = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=-1)  # [n, 2]
    n = ctrl.shape[0]

    def kernel(r2: Tensor) -> Tensor:
        return torch.where(r2 > 0, 0.5 * r2 * torch.log(r2.clamp_min(1e-30)), torch.zeros_like(r2))

    d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    k = kernel(d2)
    p = torch.cat([torch.ones(n, 1, dtype=torch.float64), ctrl], dim=-1)  # [n, 3]
    a = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    a[:n, :n] = k
    a[:n, n:] = p
    a[n:, :n] = p.T
    a_inv = torch.linalg.inv(a)

    base = _base_grid(out_hw, torch.float64, torch.device("cpu")).reshape(-1, 2)
    q2 = ((base[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    b = torch.cat([kernel(q2), torch.ones(base.shape[0], 1, dtype=torch.float64), base], dim=-1)
    m = (b @ a_inv[:, :n]).to(dtype=dtype, device=device)
    _TPS_CACHE[key] = m
    return m


def _tps_grid(params: Tensor, out_hw: tuple[int, int]) -> Tensor:
    n = TPS_GRID * TPS_GRID
    disp = params.reshape(*params.shape[:-1], n, 2)
    m = _tps_basis(out_hw, params.dtype, params.device)
    field = torch.einsum("pn,...nc->...pc", m, disp)
    base = _base_grid(out_hw, params.dtype, params.device).reshape(-1, 2)
    return (base + field).reshape(*params.shape[:-1], *out_hw, 2)


_GRID_FNS = {
    "positioning": _positioning_grid,
    "similarity": _similarity_grid,
    "affine": _affine_grid,
    "projective": _projective_grid,
    "tps": _tps_grid,
}


def _apply_color(params: Tensor, image: Tensor) -> Tensor:
    eye = torch.eye(3, dtype=params.dtype, device=params.device).reshape(9)
    mat = (params[..., :9] + eye).reshape(*params.shape[:-1], 3, 3)
    bias = params[..., 9:12]
    rgb = image[..., :3, :, :]
    mixed = torch.einsum("...ij,...jhw->...ihw", mat, rgb) + bias[..., None, None]
    if image.shape[-3] > 3:
        return torch.cat([mixed, image[..., 3:, :, :]], dim=-3)
    return mixed


@dataclass(frozen=True)
class TransformModule:
    """One transformation kind plus its parameter arity."""

    kind: str

    def __post_init__(self):
        if self.kind not in PARAM_DIMS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @property
    def param_dim(self) -> int:
        return PARAM_DIMS[self.kind]

    @property
    def is_spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def identity_params(self, dtype=None, device=None) -> Tensor:
        return torch.zeros(self.param_dim, dtype=dtype, device=device)

    def apply(self, params: Tensor, image: Tensor, out_hw: tuple[int, int] | None = None) -> Tensor:
        """Transform ``image`` ([..., C, H, W]); parameter batch dims must
        broadcast against the image batch dims."""
        _check_params(self.kind, params)
        if self.kind == "color":
            return _apply_color(params, image)
        out_hw = out_hw or image.shape[-2:]
        grid = _GRID_FNS[self.kind](params, tuple(out_hw))
        grid, image = _broadcast_grid(grid, image, tuple(out_hw))
        return _grid_sample(image, grid, tuple(out_hw))


def _broadcast_grid(grid: Tensor, image: Tensor, out_hw) -> tuple[Tensor, Tensor]:
    batch = torch.broadcast_shapes(grid.shape[:-3], image.shape[:-3])
    grid = grid.expand(*batch, *out_hw, 2)
    image = image.expand(*batch, *image.shape[-3:])
    return grid, image


def apply_module(module: TransformModule, params: Tensor, image: Tensor,
                 out_hw: tuple[int, int] | None = None) -> Tensor:
    return module.apply(params, image, out_hw)


@dataclass
class TransformSequence:
    """Ordered transformation modules with a curriculum activation state.

    Parameter vectors are always sized for the full sequence; modules that
    are not yet live are skipped (identity) regardless of their slice, so
    activating a module mid-training changes behaviour without changing
    any tensor shapes.
    """

    modules: list[TransformModule] = field(default_factory=list)
    n_active: int = -1  # -1: all active

    def __post_init__(self):
        if self.n_active < 0:
            self.n_active = len(self.modules)

    @property
    def total_dim(self) -> int:
        return sum(m.param_dim for m in self.modules)

    @property
    def live_dim(self) -> int:
        return sum(m.param_dim for m in self.modules[: self.n_active])

    def param_slices(self) -> list[slice]:
        slices, start = [], 0
        for m in self.modules:
            slices.append(slice(start, start + m.param_dim))
            start += m.param_dim
        return slices

    def activate_next(self) -> TransformModule | None:
        """Make the next module live; returns it, or None if all are live."""
        if self.n_active >= len(self.modules):
            return None
        self.n_active += 1
        return self.modules[self.n_active - 1]

    @property
    def fully_active(self) -> bool:
        return self.n_active >= len(self.modules)

    def apply(self, params: Tensor, image: Tensor,
              out_hw: tuple[int, int] | None = None) -> Tensor:
        if self.modules and params.shape[-1] != self.total_dim:
            raise ValueError(
                f"sequence expects {self.total_dim} parameters, got {params.shape[-1]}"
            )
        out_hw = tuple(out_hw or image.shape[-2:])
        out = image
        for i, (module, sl) in enumerate(zip(self.modules, self.param_slices())):
            if i >= self.n_active:
                continue
            target = out_hw if module.is_spatial else None
            out = module.apply(params[..., sl], out, target)
        if out.shape[-2:] != out_hw:
            # no live spatial module resampled onto the canvas yet
            out = _identity_resample(out, out_hw)
        return out


def _identity_resample(image: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resample with an identity grid when source and canvas sizes differ."""
    ident = TransformModule("positioning")
    params = ident.identity_params(dtype=image.dtype, device=image.device)
    return ident.apply(params, image, out_hw)


def apply_sequence(seq: TransformSequence, params: Tensor, image: Tensor,
                   out_hw: tuple[int, int] | None = None) -> Tensor:
    return seq.apply(params, image, out_hw)


def make_sequence(spec: str) -> TransformSequence:
    """Build a sequence from a dash-joined spec string, e.g. ``"col-pos"``.

    Tokens: col, pos, sim, aff, proj, tps. The empty string gives the
    identity (empty) sequence.
    """
    tokens = {
        "col": "color",
        "pos": "positioning",
        "sim": "similarity",
        "aff": "affine",
        "proj": "projective",
        "tps": "tps",
    }
    spec = (spec or "").strip()
    if spec in ("", "-"):
        return TransformSequence([])
    modules = []
    for tok in spec.split("-"):
        if tok not in tokens:
            raise ValueError(f"unknown transform token {tok!r} in spec {spec!r}")
        modules.append(TransformModule(tokens[tok]))
    return TransformSequence(modules)
