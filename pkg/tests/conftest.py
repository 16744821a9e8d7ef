import math

import pytest
import torch

from priorlift.config import config_from_text
from priorlift.field import RadianceField, inverse_softplus

SMALL = [
    "field.grid_resolution=16",
    "field.width=32",
    "field.height=32",
    "field.samples_per_ray=32",
]


def small_config(*overrides):
    return config_from_text("", SMALL + list(overrides))


def solid_sphere(resolution=32, radius=0.6, level=8.0, dtype=torch.float32, color=0.0, background=(1.0, 1.0, 1.0)):
    """Field whose pre-activation density is ``level`` inside the sphere and ``-level`` outside."""
    f = RadianceField.create(resolution, background_color=background, color=color, dtype=dtype)
    r = f.node_positions().norm(dim=-1)
    f.density_params = torch.where(r <= radius, torch.tensor(level, dtype=dtype), torch.tensor(-level, dtype=dtype))
    return f


@pytest.fixture
def small():
    return small_config


@pytest.fixture
def sphere_field():
    return solid_sphere()


def unit_density_level():
    return inverse_softplus(1.0)


def iou(a, b):
    a, b = a.bool(), b.bool()
    union = (a | b).sum().item()
    return 1.0 if union == 0 else (a & b).sum().item() / union


__all__ = ["small_config", "solid_sphere", "iou", "unit_density_level", "math", "ACCEPTANCE_LINES"]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
