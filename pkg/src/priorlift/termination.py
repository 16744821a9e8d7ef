"""Boundary-integrity metric and the early-termination policy for the self-prior."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from .condition import EdgeDetector, binarize, inner_border
from .errors import ConfigError
from .field import VALID_OPACITY, RenderOutput


@dataclass
class RayClassification:
    valid: np.ndarray  # (H, W) bool, opacity > threshold
    boundary: np.ndarray  # (H, W) bool, subset of valid
    density: Optional[np.ndarray] = None  # (H, W) aggregated density per ray

    @property
    def no_object(self) -> bool:
        return not self.valid.any() or not self.boundary.any()


def classify_rays(
    opacity_mask,
    ray_density=None,
    edge_detector: Optional[EdgeDetector] = None,
    valid_opacity: float = VALID_OPACITY,
) -> RayClassification:
    """Split pixels into valid rays and the boundary rays among them.

    By default the boundary is the valid set's inner border (valid pixels
    with an invalid 8-neighbour); ``edge_detector`` substitutes any
    mask-to-edges function, intersected with the valid set.
    """
    valid = binarize(opacity_mask, valid_opacity)
    edges = (edge_detector or inner_border)(valid).astype(bool)
    density = None
    if ray_density is not None:
        density = ray_density.detach().cpu().numpy() if isinstance(ray_density, torch.Tensor) else np.asarray(ray_density)
        density = density.astype(np.float64)
        if density.shape != valid.shape:
            raise ValueError("ray density and opacity mask differ in shape")
    return RayClassification(valid=valid, boundary=edges & valid, density=density)


def boundary_integrity(classification: RayClassification) -> Optional[float]:
    """Mean density over valid rays minus mean density over boundary rays.

    Returns ``None`` when either set is empty (no object to judge).
    """
    if classification.no_object:
        return None
    d = classification.density
    return float(d[classification.valid].mean() - d[classification.boundary].mean())


AGGREGATIONS = ("opacity", "weighted", "max")


def ray_density_of(render_out: RenderOutput, aggregation: str = "weighted") -> torch.Tensor:
    if aggregation == "opacity":
        return render_out.opacity
    if aggregation == "weighted":
        return render_out.ray_density
    if aggregation == "max":
        return render_out.ray_max_density
    raise ConfigError(f"unknown density aggregation {aggregation!r}; choose from {AGGREGATIONS}")


def delta_from_render(
    render_out: RenderOutput,
    aggregation: str = "weighted",
    valid_opacity: float = VALID_OPACITY,
    edge_detector: Optional[EdgeDetector] = None,
) -> Optional[float]:
    cls = classify_rays(render_out.opacity, ray_density_of(render_out, aggregation), edge_detector, valid_opacity)
    return boundary_integrity(cls)


@dataclass(frozen=True)
class TerminationPolicy:
    threshold: float = 0.1
    window: int = 3
    checkpoint_interval: int = 100
    max_iters: int = 5000

    def __post_init__(self):
        if self.threshold <= 0:
            raise ConfigError("termination threshold must be > 0")
        if self.window < 1:
            raise ConfigError("termination window must be >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint interval must be >= 1")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


def should_terminate(
    history: Sequence[Optional[float]], policy: TerminationPolicy, iteration: Optional[int] = None
) -> Tuple[bool, Optional[str]]:
    """Decide whether stage 1 stops.

    ``history`` holds one Δ per checkpoint, ``None`` for checkpoints with no
    object; those never count towards the window. Returns ``(stop, reason)``
    with reason ``"boundary-integrity"`` or ``"budget"``.
    """
    recent = list(history[-policy.window:])
    if len(recent) == policy.window and all(d is not None and d < policy.threshold for d in recent):
        return True, "boundary-integrity"
    if iteration is not None and iteration >= policy.max_iters:
        return True, "budget"
    return False, None
