"""Orbit cameras and pinhole ray generation.

World frame is z-up. Azimuth 0 looks at the origin from the +x axis and
azimuth grows counter-clockwise seen from above (towards +y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import torch

from .errors import InvalidCameraError


def wrap_azimuth(azimuth: float) -> float:
    """Map any angle in degrees into [-180, 180)."""
    wrapped = math.fmod(azimuth + 180.0, 360.0)
    if wrapped < 0:
        wrapped += 360.0
    # fmod can round up to exactly 360 for tiny negative inputs
    if wrapped >= 360.0:
        wrapped -= 360.0
    return wrapped - 180.0


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    distance: float
    fov: float = 40.0
    look_at: Tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        for name in ("azimuth", "elevation", "distance", "fov"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidCameraError(f"{name} must be finite")
        if self.distance <= 0:
            raise InvalidCameraError(f"distance must be > 0, got {self.distance}")
        if not 0.0 < self.fov < 180.0:
            raise InvalidCameraError(f"fov must lie in (0, 180), got {self.fov}")
        object.__setattr__(self, "azimuth", wrap_azimuth(float(self.azimuth)))
        object.__setattr__(self, "look_at", tuple(float(v) for v in self.look_at))

    @property
    def position(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        offset = self.distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        return np.asarray(self.look_at) + offset

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (forward, right, up) unit vectors of the image plane."""
        forward = np.asarray(self.look_at) - self.position
        forward = forward / np.linalg.norm(forward)
        world_up = np.array([0.0, 0.0, 1.0])
        if abs(float(forward @ world_up)) > 1.0 - 1e-9:
            # looking straight up/down: image "up" follows the azimuth direction
            az = math.radians(self.azimuth)
            world_up = np.array([-math.cos(az), -math.sin(az), 0.0]) * np.sign(-forward[2])
        right = np.cross(forward, world_up)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return forward, right, up

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "distance": self.distance,
            "fov": self.fov,
            "look_at": list(self.look_at),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraPose":
        return cls(
            azimuth=data["azimuth"],
            elevation=data["elevation"],
            distance=data["distance"],
            fov=data.get("fov", 40.0),
            look_at=tuple(data.get("look_at", (0.0, 0.0, 0.0))),
        )


def generate_rays(
    camera: CameraPose, width: int, height: int, dtype=torch.float32
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel ray origins and unit directions, each of shape (H, W, 3).

    Row 0 is the top of the image; rays pass through pixel centres.
    """
    if width < 1 or height < 1:
        raise InvalidCameraError("image size must be at least 1x1")
    forward, right, up = camera.basis()
    half = math.tan(math.radians(camera.fov) / 2.0)
    aspect = width / height
    u = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half * aspect
    v = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half
    uu, vv = np.meshgrid(u, v, indexing="xy")
    dirs = forward[None, None] + uu[..., None] * right + vv[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape)
    return torch.as_tensor(origins.copy(), dtype=dtype), torch.as_tensor(dirs, dtype=dtype)
