import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from priorlift.camera import CameraPose, generate_rays, wrap_azimuth
from priorlift.errors import InvalidCameraError


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_azimuth_range(a):
    w = wrap_azimuth(a)
    assert -180.0 <= w < 180.0
    assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(a)), abs_tol=1e-6)


@pytest.mark.parametrize("a, expected", [(180.0, -180.0), (-180.0, -180.0), (540.0, -180.0), (359.0, -1.0), (0.0, 0.0)])
def test_wrap_azimuth_examples(a, expected):
    assert wrap_azimuth(a) == pytest.approx(expected)


def test_pose_normalises_azimuth():
    assert CameraPose(190.0, 0.0, 3.0).azimuth == pytest.approx(-170.0)


def test_position_convention():
    # azimuth 0 looks from +x, azimuth 90 from +y, elevation 90 from +z
    np.testing.assert_allclose(CameraPose(0, 0, 2).position, [2, 0, 0], atol=1e-12)
    np.testing.assert_allclose(CameraPose(90, 0, 2).position, [0, 2, 0], atol=1e-12)
    np.testing.assert_allclose(CameraPose(0, 90, 2).position, [0, 0, 2], atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(distance=0.0), dict(distance=-1.0), dict(fov=0.0), dict(fov=180.0), dict(distance=float("nan")),
])
def test_degenerate_camera_rejected(kwargs):
    args = dict(azimuth=0.0, elevation=0.0, distance=3.0)
    args.update(kwargs)
    with pytest.raises(InvalidCameraError):
        CameraPose(**args)


def test_basis_orthonormal_even_looking_straight_down():
    for pose in (CameraPose(30, 20, 3), CameraPose(0, 90, 3), CameraPose(45, -90, 3)):
        f, r, u = pose.basis()
        m = np.stack([f, r, u])
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)


def test_rays_unit_and_centre_ray_hits_target():
    pose = CameraPose(30, 15, 3.0)
    o, d = generate_rays(pose, 5, 5, dtype=torch.float64)
    assert o.shape == d.shape == (5, 5, 3)
    torch.testing.assert_close(d.norm(dim=-1), torch.ones(5, 5, dtype=torch.float64))
    centre = o[2, 2] + 3.0 * d[2, 2]
    torch.testing.assert_close(centre, torch.zeros(3, dtype=torch.float64), atol=1e-12, rtol=0)


def test_image_row_zero_is_top():
    o, d = generate_rays(CameraPose(0, 0, 3), 4, 4)
    assert d[0, :, 2].min() > d[-1, :, 2].max()


def test_dict_round_trip():
    p = CameraPose(-45.0, 12.5, 3.2, 35.0, (0.1, 0.0, -0.2))
    assert CameraPose.from_dict(p.to_dict()) == p
