"""View-range confidences and adaptive camera sampling.

The azimuth circle is split into front, side and back ranges. Each range gets
a confidence from how well a text-to-image generator renders the matching
view-suffixed prompt; the softmax of those confidences becomes the sampling
distribution over ranges, uniform within each range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraPose, wrap_azimuth
from .errors import BackendError, ConfigError, InvalidInputError

VIEW_LABELS = ("front", "side", "back")
VIEW_SUFFIXES = (", front view", ", side view", ", back view")


@dataclass(frozen=True)
class ViewRange:
    label: str
    azimuth_intervals: Tuple[Tuple[float, float], ...]

    @property
    def width(self) -> float:
        return sum(hi - lo for lo, hi in self.azimuth_intervals)

    def contains(self, azimuth: float) -> bool:
        return any(lo <= azimuth < hi for lo, hi in self.azimuth_intervals)


DEFAULT_RANGES: Tuple[ViewRange, ...] = (
    ViewRange("front", ((-60.0, 60.0),)),
    ViewRange("side", ((-120.0, -60.0), (60.0, 120.0))),
    ViewRange("back", ((-180.0, -120.0), (120.0, 180.0))),
)


def classify_azimuth(azimuth: float, ranges: Sequence[ViewRange] = DEFAULT_RANGES) -> int:
    """Index of the range containing ``azimuth`` (wrapped into [-180, 180))."""
    az = wrap_azimuth(azimuth)
    for i, r in enumerate(ranges):
        if r.contains(az):
            return i
    raise InvalidInputError(f"azimuth {azimuth} is not covered by any view range")


@dataclass(frozen=True)
class TimestepSet:
    steps: Tuple[int, ...] = tuple(range(10, 101, 10))

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if not steps:
            raise ConfigError("timestep set must not be empty")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("timesteps must be strictly increasing")
        object.__setattr__(self, "steps", steps)

    def check_range(self, num_steps: int) -> None:
        if self.steps[0] < 1 or self.steps[-1] > num_steps:
            raise ConfigError(f"timesteps must lie within [1, {num_steps}]")

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


@dataclass
class ViewDistribution:
    confidences: np.ndarray
    probabilities: np.ndarray

    def to_dict(self) -> dict:
        return {
            "confidences": [float(v) for v in self.confidences],
            "probabilities": [float(v) for v in self.probabilities],
        }


def make_view_prompts(prompt: str) -> List[str]:
    if not prompt:
        raise InvalidInputError("prompt must be non-empty")
    return [prompt + suffix for suffix in VIEW_SUFFIXES]


@dataclass
class ConfidenceProbe:
    """Raw per-(view, timestep) similarity scores and their per-view means."""

    prompt: str
    view_prompts: List[str]
    timesteps: Tuple[int, ...]
    scores: Dict[str, Dict[int, float]] = field(default_factory=dict)

    @property
    def confidences(self) -> np.ndarray:
        return np.array(
            [np.mean([self.scores[label][t] for t in self.timesteps]) for label in VIEW_LABELS]
        )


def probe_view_confidence(
    generator: Callable[[str, int], object],
    scorer: Callable[[str, object], float],
    prompt: str,
    timesteps: TimestepSet = TimestepSet(),
) -> ConfidenceProbe:
    """Generate one image per (view prompt, timestep) and score it against its prompt."""
    prompts = make_view_prompts(prompt)
    probe = ConfidenceProbe(prompt, prompts, timesteps.steps)
    for label, view_prompt in zip(VIEW_LABELS, prompts):
        probe.scores[label] = {}
        for t in timesteps:
            try:
                image = generator(view_prompt, t)
                score = float(scorer(view_prompt, image))
            except BackendError:
                raise
            except Exception as exc:
                raise BackendError(f"confidence probe failed: {exc}", view=label, t=t) from exc
            if not math.isfinite(score):
                raise BackendError("scorer returned a non-finite value", view=label, t=t)
            probe.scores[label][t] = score
    return probe


def compute_view_confidence(generator, scorer, prompt: str, timesteps: TimestepSet = TimestepSet()) -> np.ndarray:
    """Mean similarity per view range, in the order front, side, back."""
    return probe_view_confidence(generator, scorer, prompt, timesteps).confidences


def view_distribution(confidences) -> ViewDistribution:
    s = np.asarray(confidences, dtype=float)
    if s.ndim != 1 or s.size == 0 or not np.all(np.isfinite(s)):
        raise InvalidInputError("confidences must be a finite, non-empty vector")
    e = np.exp(s - s.max())
    return ViewDistribution(confidences=s, probabilities=e / e.sum())


def uniform_distribution(n: int = 3) -> ViewDistribution:
    return view_distribution(np.zeros(n))


@dataclass(frozen=True)
class SamplerConfig:
    elevation_range: Tuple[float, float] = (-10.0, 45.0)
    distance_range: Tuple[float, float] = (3.0, 3.5)
    fov: float = 40.0

    def __post_init__(self):
        for name in ("elevation_range", "distance_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} must be (low, high) with low <= high")
        if self.distance_range[0] <= 0:
            raise ConfigError("camera distance must be positive")


def sample_camera(
    dist: ViewDistribution,
    rng: np.random.Generator,
    ranges: Sequence[ViewRange] = DEFAULT_RANGES,
    config: SamplerConfig = SamplerConfig(),
) -> CameraPose:
    """Draw a pose: range ~ p*, then azimuth uniform over that range."""
    p = np.asarray(dist.probabilities, dtype=float)
    if p.shape != (len(ranges),) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise InvalidInputError("distribution must be a probability vector over the ranges")
    k = int(rng.choice(len(ranges), p=p))
    chosen = ranges[k]
    widths = np.array([hi - lo for lo, hi in chosen.azimuth_intervals])
    j = int(rng.choice(len(widths), p=widths / widths.sum()))
    lo, hi = chosen.azimuth_intervals[j]
    azimuth = rng.uniform(lo, hi)
    elevation = rng.uniform(*config.elevation_range)
    distance = rng.uniform(*config.distance_range)
    return CameraPose(azimuth, elevation, distance, config.fov)
