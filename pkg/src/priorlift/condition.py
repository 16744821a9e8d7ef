"""Control conditions rendered from the self-prior and the current field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from scipy import ndimage

from .camera import CameraPose
from .errors import InvalidInputError, NoObjectError
from .field import VALID_OPACITY, RadianceField, render

EdgeDetector = Callable[[np.ndarray], np.ndarray]


SOBEL_THRESHOLD = 1.5


def sobel_edges(binary: np.ndarray) -> np.ndarray:
    """Boolean edge map of a 0/1 image.

    Sobel gradient magnitude with zero padding outside the frame, so a mask
    touching the border produces edges along it. A straight step gives
    magnitude 4 on both sides; the threshold drops pixels whose only contact
    with the other side is a single diagonal neighbour (magnitude sqrt(2)).
    The band is about two pixels wide, one on each side of the transition.
    """
    img = np.asarray(binary, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="constant", cval=0.0)
    gy = ndimage.sobel(img, axis=0, mode="constant", cval=0.0)
    return np.hypot(gx, gy) > SOBEL_THRESHOLD


def inner_border(binary: np.ndarray) -> np.ndarray:
    """Pixels of a 0/1 image that have at least one 8-neighbour outside it.

    Outside the frame counts as empty, so a full-frame mask yields the frame.
    """
    b = np.asarray(binary, dtype=bool)
    return b & ~ndimage.binary_erosion(b, structure=np.ones((3, 3), dtype=bool), border_value=0)


def binarize(mask, threshold: float = VALID_OPACITY) -> np.ndarray:
    m = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if m.ndim != 2:
        raise InvalidInputError("mask must be a 2-D image")
    if m.size and (m.min() < 0 or m.max() > 1):
        raise InvalidInputError("mask values must lie in [0, 1]")
    return m > threshold


@dataclass
class ConditionImage:
    kind: str  # "edge", "normal" or "mask"
    data: torch.Tensor  # (H, W) or (H, W, 3), values in [0, 1]
    source_pose: Optional[CameraPose] = None

    def as_image(self) -> torch.Tensor:
        """Three-channel (H, W, 3) view of the data, as fed to guidance models."""
        if self.data.ndim == 2:
            return self.data[..., None].expand(*self.data.shape, 3)
        return self.data


def edge_condition(
    opacity_mask,
    *,
    threshold: float = VALID_OPACITY,
    dilation: int = 0,
    detector: Optional[EdgeDetector] = None,
    pose: Optional[CameraPose] = None,
) -> ConditionImage:
    """Thin boundary image of a rendered opacity mask.

    ``detector`` replaces the built-in Sobel detector (for instance with a
    learned HED-style model); it receives the binarised mask and must return
    an array of the same shape.
    """
    binary = binarize(opacity_mask, threshold)
    edges = (detector or sobel_edges)(binary).astype(bool)
    if edges.shape != binary.shape:
        raise InvalidInputError("edge detector changed the image shape")
    if dilation > 0:
        edges = ndimage.binary_dilation(edges, iterations=dilation)
    return ConditionImage("edge", torch.from_numpy(edges.astype(np.float32)), pose)


def normal_condition(normal: torch.Tensor, valid: torch.Tensor, pose: Optional[CameraPose] = None) -> ConditionImage:
    """Encode unit normals into [0, 1]; invalid pixels become 0."""
    encoded = torch.where(valid[..., None], (normal + 1.0) / 2.0, torch.zeros_like(normal))
    return ConditionImage("normal", encoded.float(), pose)


@dataclass
class PairedConditions:
    rgb: torch.Tensor  # differentiable render of the current field
    normal: ConditionImage
    edge: ConditionImage
    pose: CameraPose
    prior_mask: torch.Tensor


def paired_conditions(
    current: RadianceField,
    prior: RadianceField,
    camera: CameraPose,
    width: int,
    height: int,
    samples_per_ray: int = 64,
    *,
    generator: Optional[torch.Generator] = None,
    threshold: float = VALID_OPACITY,
    detector: Optional[EdgeDetector] = None,
) -> PairedConditions:
    """Render the current field and the prior's edge condition at one pose."""
    with torch.no_grad():
        prior_mask = render(prior, camera, width, height, samples_per_ray, with_normals=False).opacity
    if not bool((prior_mask > threshold).any()):
        raise NoObjectError("prior empty: no pixel of the prior exceeds the opacity threshold")
    out = render(current, camera, width, height, samples_per_ray, generator=generator, valid_opacity=threshold)
    return PairedConditions(
        rgb=out.rgb,
        normal=normal_condition(out.normal, out.normal_valid, camera),
        edge=edge_condition(prior_mask, threshold=threshold, detector=detector, pose=camera),
        pose=camera,
        prior_mask=prior_mask,
    )


def silhouette_from_edges(edge: torch.Tensor) -> np.ndarray:
    """Filled region enclosed by a closed edge band, band thickness compensated.

    The Sobel band straddles the contour by one pixel on each side, so the
    filled region is eroded once to land back on the silhouette.
    """
    band = edge.detach().cpu().numpy() > 0.5
    filled = ndimage.binary_fill_holes(band)
    return ndimage.binary_erosion(filled, border_value=1)
