import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from priorlift.camera import CameraPose, generate_rays
from priorlift.errors import InvalidCameraError, InvalidInputError
from priorlift.field import (
    RadianceField,
    blob_field,
    inverse_softplus,
    query_field,
    render,
    render_density_mask,
    render_normal_map,
)
from priorlift.mock import SphereTarget

from conftest import iou, solid_sphere


def slab_field(density=1.0, samples_dtype=torch.float64):
    """Constant density inside the unit box, white emitter, black background."""
    return RadianceField.create(
        4, background_color=(0.0, 0.0, 0.0), density=inverse_softplus(density), color=30.0, dtype=samples_dtype
    )


def axis_camera():
    return CameraPose(0.0, 0.0, 3.0, fov=1.0)


class TestQuery:
    def test_zero_field_has_no_density(self):
        f = RadianceField.create(8, density=-30.0)
        d, _ = query_field(f, (0.1, -0.2, 0.3))
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_outside_bounds_returns_background(self):
        f = RadianceField.create(8, background_color=(0.2, 0.4, 0.6), density=5.0)
        d, c = query_field(f, (1.5, 0.0, 0.0))
        assert d == 0.0
        np.testing.assert_allclose(c, [0.2, 0.4, 0.6])

    @given(st.floats(-5, 5), st.tuples(*[st.floats(-0.99, 0.99)] * 3))
    @settings(max_examples=30, deadline=None)
    def test_uniform_lattice_gives_softplus(self, v, p):
        f = RadianceField.create(5, density=v, dtype=torch.float64)
        d, _ = query_field(f, p)
        assert d == pytest.approx(math.log1p(math.exp(v)), rel=1e-9)

    def test_non_finite_point_rejected(self):
        with pytest.raises(InvalidInputError):
            query_field(RadianceField.create(4), (float("nan"), 0.0, 0.0))

    def test_activations_bounded(self):
        torch.manual_seed(0)
        f = RadianceField(torch.randn(6, 6, 6) * 20, torch.randn(3, 6, 6, 6) * 20)
        pts = torch.rand(500, 3) * 2.4 - 1.2
        d, c = f.query(pts)
        assert (d >= 0).all()
        assert ((c >= 0) & (c <= 1)).all()

    def test_lattice_is_x_fastest(self):
        f = RadianceField.create(3, density=-30.0, dtype=torch.float64)
        f.density_params[0, 0, 2] = 5.0  # z=-1, y=-1, x=+1
        d, _ = query_field(f, (1.0, -1.0, -1.0))
        assert d == pytest.approx(math.log1p(math.exp(5.0)))


class TestRender:
    def test_empty_scene_is_background(self):
        f = RadianceField.create(8, background_color=(0.3, 0.5, 0.7), density=-40.0)
        out = render(f, CameraPose(20, 10, 3), 6, 5, 16)
        torch.testing.assert_close(out.rgb, torch.tensor([0.3, 0.5, 0.7]).expand(5, 6, 3), atol=1e-6, rtol=0)
        assert out.opacity.abs().max() < 1e-6

    def test_slab_opacity_closed_form(self):
        out = render(slab_field(), axis_camera(), 1, 1, 64)
        assert out.opacity.item() == pytest.approx(1 - math.exp(-2.0), abs=1e-3)

    def test_slab_matches_finer_quadrature(self):
        coarse = render(slab_field(), axis_camera(), 1, 1, 32).opacity.item()
        fine = render(slab_field(), axis_camera(), 1, 1, 320).opacity.item()
        assert abs(coarse - fine) < 1e-3

    def test_doubling_samples_keeps_slab_opacity(self):
        a = render(slab_field(), axis_camera(), 3, 3, 48).opacity
        b = render(slab_field(), axis_camera(), 3, 3, 96).opacity
        assert (a - b).abs().max() < 1e-3

    def test_weights_and_transmittance_conserve(self):
        torch.manual_seed(1)
        f = RadianceField(torch.randn(8, 8, 8, dtype=torch.float64) * 3, torch.randn(3, 8, 8, 8, dtype=torch.float64))
        out = render(f, CameraPose(35, 20, 2.8), 9, 7, 40)
        total = out.weights.sum(-1) + (1.0 - out.opacity)
        assert (total - 1).abs().max() < 1e-6

    def test_transmittance_monotone(self):
        out = render(solid_sphere(), CameraPose(10, 5, 3), 8, 8, 32)
        assert (out.transmittance[..., 1:] <= out.transmittance[..., :-1] + 1e-7).all()

    def test_rgb_composite_identity(self):
        f = solid_sphere(color=1.0, background=(0.1, 0.2, 0.3))
        out = render(f, CameraPose(-70, 30, 3), 8, 8, 24)
        fg = torch.sigmoid(torch.tensor(1.0)) * out.weights.sum(-1, keepdim=True)
        bg = (1 - out.opacity)[..., None] * torch.tensor([0.1, 0.2, 0.3])
        torch.testing.assert_close(out.rgb, fg + bg, atol=1e-5, rtol=0)

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(InvalidInputError):
            render(RadianceField.create(4), CameraPose(0, 0, 3), 0, 4, 8)

    def test_degenerate_camera_error(self):
        with pytest.raises(InvalidCameraError):
            render(RadianceField.create(4), CameraPose(0, 0, -1.0), 4, 4, 8)

    def test_jitter_is_seeded(self):
        f = solid_sphere(16)
        a = render(f, CameraPose(0, 0, 3), 6, 6, 16, generator=torch.Generator().manual_seed(3))
        b = render(f, CameraPose(0, 0, 3), 6, 6, 16, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a.rgb, b.rgb)


class TestMaskAndNormals:
    def test_mask_of_empty_field(self):
        assert render_density_mask(RadianceField.create(8, density=-40.0), CameraPose(0, 0, 3), 8, 8).max() < 1e-6

    def test_sphere_mask_matches_analytic_disc(self):
        f = solid_sphere(48, radius=0.6, level=12.0)
        cam = CameraPose(25, 10, 3.0)
        mask = render_density_mask(f, cam, 48, 48, 96)
        truth = SphereTarget(0.6).silhouette(cam, 48, 48)
        assert iou(mask > 0.5, truth) > 0.9
        # well inside the disc the sphere is opaque
        o, d = generate_rays(cam, 48, 48, dtype=torch.float64)
        closest = (o + (-(o * d).sum(-1, keepdim=True)) * d).norm(dim=-1)
        assert mask[closest < 0.45].min() > 0.99

    def test_mask_equals_full_render_opacity(self, sphere_field):
        cam = CameraPose(100, -5, 3.2)
        torch.testing.assert_close(render_density_mask(sphere_field, cam, 10, 10, 20),
                                   render(sphere_field, cam, 10, 10, 20).opacity)

    def test_sphere_centre_normal_points_to_camera(self):
        f = solid_sphere(48, radius=0.6, level=12.0, dtype=torch.float64)
        normal, valid = render_normal_map(f, CameraPose(0, 0, 3), 9, 9, 96)
        assert valid[4, 4]
        np.testing.assert_allclose(normal[4, 4].numpy(), [1, 0, 0], atol=0.05)

    def test_half_space_normals_point_up(self):
        f = RadianceField.create(16, density=-20.0, dtype=torch.float64)
        z = f.node_positions()[..., 2]
        f.density_params = torch.where(z < 0, torch.tensor(10.0, dtype=torch.float64), f.density_params)
        normal, valid = render_normal_map(f, CameraPose(0, 90, 3, fov=20), 6, 6, 64)
        assert valid.all()
        np.testing.assert_allclose(normal.reshape(-1, 3).numpy(), np.tile([0, 0, 1.0], (36, 1)), atol=0.05)

    def test_valid_normals_are_unit(self):
        normal, valid = render_normal_map(blob_field(16, 6.0), CameraPose(40, 25, 3), 16, 16, 32)
        assert valid.any()
        assert (normal[valid].norm(dim=-1) - 1).abs().max() < 1e-4
        assert (normal[~valid] == 0).all()


def _fd_check(param_name):
    torch.manual_seed(0)
    f = RadianceField(torch.randn(4, 4, 4, dtype=torch.float64), torch.randn(3, 4, 4, 4, dtype=torch.float64),
                      background_color=(0.2, 0.5, 0.9))
    cam = CameraPose(30, 20, 2.5)
    target = torch.rand(8, 8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss(field):
        return ((render(field, cam, 8, 8, 24, with_normals=False).rgb - target) ** 2).mean()

    f.requires_grad_(True)
    loss(f).backward()
    param = getattr(f, param_name)
    analytic = param.grad.detach().clone()
    numeric = torch.zeros_like(analytic)
    h = 1e-3
    with torch.no_grad():
        flat, nflat = param.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            lp = loss(f).item()
            flat[i] = old - h
            lm = loss(f).item()
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * h)
    scale = numeric.abs().max()
    assert scale > 0
    err = (analytic - numeric).abs() / torch.maximum(numeric.abs(), 1e-3 * scale)
    return err.max().item()


def test_density_gradient_matches_finite_differences():
    assert _fd_check("density_params") < 1e-2


def test_color_gradient_matches_finite_differences():
    assert _fd_check("color_params") < 1e-2


def test_blob_field_profile():
    f = blob_field(9, peak_density=4.0, radius=0.5, floor=-6.0)
    assert f.density_params.max().item() == pytest.approx(4.0)
    assert f.density_params.min().item() == pytest.approx(-6.0)


def test_digest_tracks_parameters(sphere_field):
    g = sphere_field.clone()
    assert g.digest() == sphere_field.digest()
    g.density_params[0, 0, 0] += 1.0
    assert g.digest() != sphere_field.digest()
