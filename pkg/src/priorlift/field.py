"""Dense voxel radiance field and its differentiable volume renderer."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraPose, generate_rays
from .errors import InvalidInputError

Bounds = Tuple[Tuple[float, float, float], Tuple[float, float, float]]

DEFAULT_BOUNDS: Bounds = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
# opacity above which a pixel counts as covered by the object
VALID_OPACITY = 0.5
# density-gradient magnitude below which a normal is undefined
NORMAL_EPS = 1e-6


def inverse_softplus(y: float) -> float:
    """Pre-activation value whose softplus equals ``y`` (y > 0)."""
    if y <= 0:
        raise InvalidInputError("inverse_softplus needs a positive value")
    return y + math.log(-math.expm1(-y))


class RadianceField:
    """Trilinear voxel lattice holding pre-activation density and colour.

    Lattices are stored ``[z, y, x]`` (x fastest in memory) so they feed
    :func:`torch.nn.functional.grid_sample` directly. Nodes sit on the
    bounding-box corners (``align_corners=True``). Density is softplus
    activated, colour is sigmoid activated, and any query outside ``bounds``
    returns zero density and the background colour.
    """

    def __init__(
        self,
        density_params: torch.Tensor,
        color_params: torch.Tensor,
        bounds: Bounds = DEFAULT_BOUNDS,
        background_color: Sequence[float] = (1.0, 1.0, 1.0),
    ):
        if density_params.ndim != 3 or len(set(density_params.shape)) != 1:
            raise InvalidInputError("density lattice must be a cube of shape (R, R, R)")
        if tuple(color_params.shape) != (3,) + tuple(density_params.shape):
            raise InvalidInputError("colour lattice must have shape (3, R, R, R)")
        lo, hi = (tuple(float(v) for v in b) for b in bounds)
        if any(h <= l for l, h in zip(lo, hi)):
            raise InvalidInputError("bounds must have positive extent on every axis")
        self.density_params = density_params
        self.color_params = color_params
        self.bounds: Bounds = (lo, hi)
        self.background_color = tuple(float(c) for c in background_color)

    @classmethod
    def create(
        cls,
        resolution: int = 64,
        bounds: Bounds = DEFAULT_BOUNDS,
        background_color: Sequence[float] = (1.0, 1.0, 1.0),
        density: float = 0.0,
        color: float = 0.0,
        dtype=torch.float32,
    ) -> "RadianceField":
        """Uniform field with the given *pre-activation* density and colour."""
        if resolution < 2:
            raise InvalidInputError("grid resolution must be at least 2")
        r = resolution
        dens = torch.full((r, r, r), float(density), dtype=dtype)
        col = torch.full((3, r, r, r), float(color), dtype=dtype)
        return cls(dens, col, bounds, background_color)

    @property
    def grid_resolution(self) -> int:
        return int(self.density_params.shape[0])

    @property
    def dtype(self):
        return self.density_params.dtype

    @property
    def voxel_size(self) -> np.ndarray:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return (hi - lo) / (self.grid_resolution - 1)

    def node_positions(self) -> torch.Tensor:
        """World coordinates of every lattice node, shape (R, R, R, 3) as [z, y, x]."""
        lo, hi = self.bounds
        axes = [torch.linspace(lo[i], hi[i], self.grid_resolution, dtype=self.dtype) for i in range(3)]
        zz, yy, xx = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([xx, yy, zz], dim=-1)

    def parameters(self):
        return [self.density_params, self.color_params]

    def requires_grad_(self, flag: bool = True) -> "RadianceField":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clone(self) -> "RadianceField":
        return RadianceField(
            self.density_params.detach().clone(),
            self.color_params.detach().clone(),
            self.bounds,
            self.background_color,
        )

    def digest(self) -> str:
        """SHA-256 over both lattices; equal digests mean bit-identical fields."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def query(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Activated (density, colour) at points of shape (..., 3)."""
        shape = points.shape[:-1]
        pts = points.reshape(-1, 3).to(self.dtype)
        lo = torch.tensor(self.bounds[0], dtype=self.dtype)
        hi = torch.tensor(self.bounds[1], dtype=self.dtype)
        g = 2.0 * (pts - lo) / (hi - lo) - 1.0
        inside = (g.abs() <= 1.0).all(dim=-1)
        lattice = torch.cat([self.density_params[None], self.color_params], dim=0)[None]
        sampled = F.grid_sample(
            lattice,
            g.view(1, -1, 1, 1, 3),
            mode="bilinear",
            padding_mode="border",
            align_corners=True,
        ).view(4, -1)
        density = torch.where(inside, F.softplus(sampled[0]), torch.zeros_like(sampled[0]))
        bg = torch.tensor(self.background_color, dtype=self.dtype)
        color = torch.where(inside[:, None], torch.sigmoid(sampled[1:].T), bg)
        return density.view(shape), color.view(*shape, 3)

    def density(self, points: torch.Tensor) -> torch.Tensor:
        return self.query(points)[0]


def query_field(field: RadianceField, point) -> Tuple[float, np.ndarray]:
    """Density and colour at a single world point."""
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"point must be a finite 3-vector, got {point!r}")
    with torch.no_grad():
        d, c = field.query(torch.as_tensor(p, dtype=field.dtype)[None])
    return float(d[0]), c[0].numpy().astype(float)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    opacity: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)
    normal: Optional[torch.Tensor] = None  # (H, W, 3), zero where invalid
    normal_valid: Optional[torch.Tensor] = None  # (H, W) bool
    weights: Optional[torch.Tensor] = None  # (H, W, S)
    transmittance: Optional[torch.Tensor] = None  # (H, W, S) before each sample
    ray_density: Optional[torch.Tensor] = None  # (H, W) sum_i w_i * sigma_i
    ray_max_density: Optional[torch.Tensor] = None  # (H, W)

    def detach(self) -> "RenderOutput":
        kwargs = {k: (v.detach() if isinstance(v, torch.Tensor) else v) for k, v in vars(self).items()}
        return RenderOutput(**kwargs)


def _ray_box(origins, dirs, lo, hi):
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    tnear = torch.minimum(t0, t1).amax(dim=-1).clamp_min(0.0)
    tfar = torch.maximum(t0, t1).amin(dim=-1)
    hit = tfar > tnear
    tfar = torch.where(hit, tfar, tnear)
    return tnear, tfar, hit


def _density_gradient(field: RadianceField, points: torch.Tensor) -> torch.Tensor:
    h = field.voxel_size
    grads = []
    for axis in range(3):
        step = torch.zeros(3, dtype=field.dtype)
        step[axis] = float(h[axis])
        plus = field.density(points + step)
        minus = field.density(points - step)
        grads.append((plus - minus) / (2.0 * float(h[axis])))
    return torch.stack(grads, dim=-1)


def render(
    field: RadianceField,
    camera: CameraPose,
    width: int,
    height: int,
    samples_per_ray: int = 64,
    *,
    generator: Optional[torch.Generator] = None,
    with_normals: bool = True,
    valid_opacity: float = VALID_OPACITY,
) -> RenderOutput:
    """Alpha-composite the field along one ray per pixel.

    Samples are placed in equal bins between the ray's entry and exit of the
    bounding box: bin midpoints by default, uniformly jittered inside each bin
    when a ``generator`` is supplied. Gradients flow to the field lattices
    through ``rgb``, ``opacity`` and ``depth``; normals are computed without
    gradient.
    """
    if width < 1 or height < 1 or samples_per_ray < 1:
        raise InvalidInputError("width, height and samples_per_ray must all be >= 1")
    dtype = field.dtype
    origins, dirs = generate_rays(camera, width, height, dtype=dtype)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    lo = torch.tensor(field.bounds[0], dtype=dtype)
    hi = torch.tensor(field.bounds[1], dtype=dtype)
    tnear, tfar, _ = _ray_box(origins, dirs, lo, hi)

    n = samples_per_ray
    delta = (tfar - tnear) / n
    if generator is None:
        offsets = torch.full((1, n), 0.5, dtype=dtype)
    else:
        offsets = torch.rand((origins.shape[0], n), generator=generator, dtype=dtype)
    t = tnear[:, None] + (torch.arange(n, dtype=dtype)[None] + offsets) * delta[:, None]
    points = origins[:, None] + t[..., None] * dirs[:, None]

    sigma, color = field.query(points)
    optical = sigma * delta[:, None]
    alpha = 1.0 - torch.exp(-optical)
    accumulated = torch.cumsum(optical, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(accumulated[:, :1]), accumulated[:, :-1]], dim=-1))
    weights = alpha * trans
    final_trans = torch.exp(-accumulated[:, -1])

    bg = torch.tensor(field.background_color, dtype=dtype)
    rgb = (weights[..., None] * color).sum(dim=1) + final_trans[:, None] * bg
    opacity = 1.0 - final_trans
    depth_sum = (weights * t).sum(dim=1)
    depth = torch.where(opacity > 1e-8, depth_sum / opacity.clamp_min(1e-8), torch.zeros_like(depth_sum))

    hw = (height, width)
    out = RenderOutput(
        rgb=rgb.view(*hw, 3),
        opacity=opacity.view(hw),
        depth=depth.view(hw),
        weights=weights.view(*hw, n),
        transmittance=trans.view(*hw, n),
        ray_density=(weights * sigma).sum(dim=1).view(hw),
        ray_max_density=sigma.amax(dim=1).view(hw),
    )
    if with_normals:
        with torch.no_grad():
            grad = _density_gradient(field, points.detach())
            norm = grad.norm(dim=-1, keepdim=True)
            ok = norm > NORMAL_EPS
            per_sample = torch.where(ok, -grad / norm.clamp_min(NORMAL_EPS), torch.zeros_like(grad))
            w = weights.detach() * ok[..., 0]
            composite = (w[..., None] * per_sample).sum(dim=1)
            cnorm = composite.norm(dim=-1, keepdim=True)
            valid = (opacity.detach() > valid_opacity) & (cnorm[:, 0] > NORMAL_EPS)
            normal = torch.where(valid[:, None], composite / cnorm.clamp_min(NORMAL_EPS), torch.zeros_like(composite))
        out.normal = normal.view(*hw, 3)
        out.normal_valid = valid.view(hw)
    return out


def render_density_mask(
    field: RadianceField, camera: CameraPose, width: int, height: int, samples_per_ray: int = 64
) -> torch.Tensor:
    """Per-pixel accumulated opacity, shape (H, W)."""
    with torch.no_grad():
        return render(field, camera, width, height, samples_per_ray, with_normals=False).opacity


def render_normal_map(
    field: RadianceField,
    camera: CameraPose,
    width: int,
    height: int,
    samples_per_ray: int = 64,
    valid_opacity: float = VALID_OPACITY,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-space unit normals (H, W, 3) and the boolean validity mask (H, W)."""
    with torch.no_grad():
        out = render(field, camera, width, height, samples_per_ray, valid_opacity=valid_opacity)
    return out.normal, out.normal_valid


def blob_field(
    resolution: int,
    peak_density: float = 10.0,
    radius: float = 0.5,
    floor: float = -6.0,
    color: float = 0.0,
    bounds: Bounds = DEFAULT_BOUNDS,
    background_color: Sequence[float] = (1.0, 1.0, 1.0),
    dtype=torch.float32,
) -> RadianceField:
    """Field initialised with a centred density blob.

    Pre-activation density falls linearly from ``peak_density`` at the centre
    to zero at ``radius`` and is clamped below at ``floor``.
    """
    f = RadianceField.create(resolution, bounds, background_color, color=color, dtype=dtype)
    centre = torch.tensor([(l + h) / 2 for l, h in zip(*bounds)], dtype=dtype)
    r = (f.node_positions() - centre).norm(dim=-1)
    f.density_params = (peak_density * (1.0 - r / radius)).clamp_min(floor).to(dtype)
    return f
