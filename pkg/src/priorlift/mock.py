"""Offline stand-ins for diffusion models and image-text scorers.

The target oracles predict noise as if the clean image were a known target,
``eps_hat = (x_t - alpha_t * target) / sigma_t``. Score distillation against
them reduces to pulling renders toward the target, which makes end-to-end
behaviour checkable against analytic geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .camera import CameraPose, generate_rays
from .condition import silhouette_from_edges
from .errors import ConfigError, InvalidInputError
from .guidance import NoiseSchedule
from .viewpoint import VIEW_LABELS, VIEW_SUFFIXES

TargetFn = Callable[[CameraPose, int, int], torch.Tensor]

WARM = (0.9, 0.35, 0.2)
COOL = (0.2, 0.35, 0.9)


@dataclass(frozen=True)
class EllipsoidTarget:
    """Opaque textured ellipsoid rendered analytically.

    Surface colour blends from ``front_color`` where the outward normal points
    to +x to ``back_color`` where it points to -x, so views from different
    azimuths disagree in colour.
    """

    radii: Tuple[float, float, float] = (0.6, 0.6, 0.6)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    front_color: Tuple[float, float, float] = WARM
    back_color: Tuple[float, float, float] = COOL
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def _hit(self, camera: CameraPose, width: int, height: int):
        o, d = generate_rays(camera, width, height, dtype=torch.float64)
        r = torch.tensor(self.radii, dtype=torch.float64)
        c0 = torch.tensor(self.center, dtype=torch.float64)
        # unit sphere in scaled coordinates
        os_, ds = (o - c0) / r, d / r
        a = (ds * ds).sum(-1)
        b = (os_ * ds).sum(-1)
        c = (os_ * os_).sum(-1) - 1.0
        disc = b * b - a * c
        t = (-b - torch.sqrt(disc.clamp_min(0.0))) / a
        hit = (disc > 0) & (t > 0)
        point = o + t[..., None] * d
        normal = (point - c0) / r**2
        normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return hit, normal

    def silhouette(self, camera: CameraPose, width: int, height: int) -> torch.Tensor:
        return self._hit(camera, width, height)[0]

    def __call__(self, camera: CameraPose, width: int, height: int) -> torch.Tensor:
        hit, normal = self._hit(camera, width, height)
        f = torch.tensor(self.front_color, dtype=torch.float64)
        b = torch.tensor(self.back_color, dtype=torch.float64)
        mix = ((1.0 + normal[..., :1]) / 2.0).clamp(0.0, 1.0)
        surface = mix * f + (1.0 - mix) * b
        bg = torch.tensor(self.background, dtype=torch.float64).expand_as(surface)
        return torch.where(hit[..., None], surface, bg).float()


def SphereTarget(radius: float = 0.6, **kwargs) -> EllipsoidTarget:
    return EllipsoidTarget(radii=(radius, radius, radius), **kwargs)


class TargetOracle:
    """Camera-indexed target oracle with optional front-view bias.

    With ``bias`` = β the target for pose c is ``(1-β)·target(c) + β·target(c_front)``
    where ``c_front`` keeps c's elevation and distance but looks from
    ``front_azimuth``. β = 1 makes every view ask for the front image.
    """

    supports_condition = False
    supports_text = True

    def __init__(self, target_fn: TargetFn, schedule: NoiseSchedule, bias: float = 0.0, front_azimuth: float = 0.0):
        if not 0.0 <= bias <= 1.0:
            raise ConfigError("bias must lie in [0, 1]")
        self.target_fn = target_fn
        self.schedule = schedule
        self.bias = float(bias)
        self.front_azimuth = front_azimuth

    def target(self, camera: CameraPose, width: int, height: int) -> torch.Tensor:
        img = self.target_fn(camera, width, height)
        if self.bias > 0:
            front = self.target_fn(replace(camera, azimuth=self.front_azimuth), width, height)
            img = (1.0 - self.bias) * img + self.bias * front
        return img

    def predict_noise(self, x_t, t, prompt, condition=None, camera=None):
        if camera is None:
            raise InvalidInputError("target oracle needs the render camera")
        h, w = x_t.shape[:2]
        target = self.target(camera, w, h).to(x_t.dtype)
        return (x_t - self.schedule.alpha(t) * target) / self.schedule.sigma(t)


class ConditionedTargetOracle:
    """Edge-conditioned target oracle.

    The clean image it "believes in" is the region enclosed by the edge
    condition, painted with ``color_fn(camera, W, H)`` (a constant colour by
    default), over the background. Without a condition it falls back to a
    blank background target.
    """

    supports_condition = True
    supports_text = True

    def __init__(
        self,
        schedule: NoiseSchedule,
        color: Sequence[float] = WARM,
        background: Sequence[float] = (1.0, 1.0, 1.0),
        color_fn: Optional[TargetFn] = None,
    ):
        self.schedule = schedule
        self.color = tuple(color)
        self.background = tuple(background)
        self.color_fn = color_fn

    def target(self, condition, camera, width, height) -> torch.Tensor:
        bg = torch.tensor(self.background).expand(height, width, 3)
        if condition is None:
            return bg.clone()
        edge = condition if condition.ndim == 2 else condition[..., 0]
        inside = torch.from_numpy(silhouette_from_edges(edge))
        if self.color_fn is not None and camera is not None:
            fg = self.color_fn(camera, width, height).float()
        else:
            fg = torch.tensor(self.color).expand(height, width, 3)
        return torch.where(inside[..., None], fg, bg)

    def predict_noise(self, x_t, t, prompt, condition=None, camera=None):
        h, w = x_t.shape[:2]
        target = self.target(condition, camera, w, h).to(x_t.dtype)
        return (x_t - self.schedule.alpha(t) * target) / self.schedule.sigma(t)


def self_target_oracle(field, schedule: NoiseSchedule, samples_per_ray: int = 64) -> TargetOracle:
    """Oracle whose target is the field's own current render: zero SDS signal."""
    from .field import render

    def target_fn(camera, width, height):
        with torch.no_grad():
            return render(field, camera, width, height, samples_per_ray, with_normals=False).rgb

    return TargetOracle(target_fn, schedule)


# Confidences whose softmax is the reference corgi view distribution (68.75 / 4.75 / 26.51 %).
CORGI_PROBABILITIES = (0.6875, 0.0475, 0.2651)
CORGI_LOGITS = tuple(math.log(p) for p in CORGI_PROBABILITIES)


@dataclass
class FixtureImage:
    prompt: str
    t: int


class FixtureGenerator:
    """Records every (prompt, t) request and returns a token image."""

    def __init__(self):
        self.calls = []

    def __call__(self, prompt: str, t: int) -> FixtureImage:
        self.calls.append((prompt, t))
        return FixtureImage(prompt, t)


class FixtureScorer:
    """Per-view base score plus a ripple that averages out over the default timesteps.

    The ripple ``amplitude * sin(2π t / 100)`` sums to zero over
    t = 10, 20, ..., 100, so the mean over that set equals the base score.
    """

    def __init__(self, view_scores: Optional[Dict[str, float]] = None, amplitude: float = 0.01):
        self.view_scores = dict(view_scores or dict(zip(VIEW_LABELS, CORGI_LOGITS)))
        self.amplitude = amplitude

    def __call__(self, text: str, image) -> float:
        for label, suffix in zip(VIEW_LABELS, VIEW_SUFFIXES):
            if text.endswith(suffix):
                t = getattr(image, "t", 0)
                return self.view_scores[label] + self.amplitude * math.sin(2 * math.pi * t / 100.0)
        raise InvalidInputError(f"fixture scorer cannot place prompt {text!r} in a view range")
