import json

import numpy as np
import pytest
import torch

from priorlift.camera import CameraPose
from priorlift.errors import FormatError
from priorlift.field import RadianceField, render, render_density_mask
from priorlift.io import (
    MAGIC,
    load_checkpoint,
    load_external_prior,
    load_png,
    occupancy_to_field,
    save_checkpoint,
    save_png,
    to_uint8,
)
from priorlift.mock import SphereTarget

from conftest import iou, solid_sphere


def random_field(r=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return RadianceField(torch.randn(r, r, r, generator=g), torch.randn(3, r, r, r, generator=g),
                         ((-1.0, -0.5, -1.0), (1.0, 0.5, 2.0)), (0.1, 0.2, 0.3))


def test_round_trip_identical_renders(tmp_path):
    f = random_field()
    save_checkpoint(f, tmp_path / "a.ckpt")
    g = load_checkpoint(tmp_path / "a.ckpt")
    assert g.bounds == f.bounds and g.background_color == f.background_color
    cam = CameraPose(30, 20, 3)
    assert torch.equal(render(f, cam, 8, 8, 16).rgb, render(g, cam, 8, 8, 16).rgb)


def test_byte_layout(tmp_path):
    f = random_field(r=3)
    save_checkpoint(f, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw.startswith(MAGIC)
    head, _, payload = raw[len(MAGIC):].partition(b"\n")
    header = json.loads(head)
    assert header == {"version": 1, "grid_resolution": 3, "bounds": [[-1.0, -0.5, -1.0], [1.0, 0.5, 2.0]],
                      "background": [0.1, 0.2, 0.3], "dtype": "<f4"}
    vals = np.frombuffer(payload, "<f4")
    assert vals.size == 4 * 27
    # x fastest: element (z=0, y=0, x=1) is the second float
    assert vals[1] == f.density_params[0, 0, 1].item()
    assert vals[27 + 2 * 27 + 5] == f.color_params[2].reshape(-1)[5].item()


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOT-A-CHECKPOINT" + b[len(MAGIC):],
    lambda b: MAGIC + b"{broken json\n" + b.split(b"\n", 2)[2],
    lambda b: b.replace(b'"version": 1', b'"version": 9'),
    lambda b: b.replace(b'"dtype": "<f4"', b'"dtype": "<f8"'),
    lambda b: b[:-4],
    lambda b: b + b"\0\0\0\0",
    lambda b: MAGIC,
])
def test_corruption_rejected(tmp_path, mutate):
    save_checkpoint(random_field(), tmp_path / "a.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(mutate((tmp_path / "a.ckpt").read_bytes()))
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_occupancy_sphere_renders_sphere(tmp_path):
    n = 32
    c = (np.arange(n) + 0.5) / n * 2 - 1
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    occ = x**2 + y**2 + z**2 <= 0.6**2
    np.save(tmp_path / "occ.npy", occ)
    f = load_external_prior(tmp_path / "occ.npy")
    for cam in (CameraPose(0, 0, 3), CameraPose(120, 30, 3.2)):
        mask = render_density_mask(f, cam, 32, 32, 64) > 0.5
        assert iou(mask, SphereTarget(0.6).silhouette(cam, 32, 32)) >= 0.8


def test_occupancy_levels():
    occ = np.zeros((4, 4, 4), bool)
    occ[1, 2, 3] = True
    f = occupancy_to_field(occ)
    assert f.density_params[1, 2, 3] == 8.0 and f.density_params[0, 0, 0] == -8.0


@pytest.mark.parametrize("shape", [(4, 4), (4, 4, 5), (1, 1, 1)])
def test_occupancy_shape_rejected(shape):
    with pytest.raises(FormatError):
        occupancy_to_field(np.zeros(shape, bool))


def test_external_prior_dispatch(tmp_path):
    save_checkpoint(solid_sphere(8), tmp_path / "p.ckpt")
    assert load_external_prior(tmp_path / "p.ckpt").grid_resolution == 8
    (tmp_path / "junk.bin").write_bytes(b"hello world")
    with pytest.raises(FormatError):
        load_external_prior(tmp_path / "junk.bin")
    with pytest.raises(FormatError):
        load_external_prior(tmp_path / "missing.ckpt")


def test_png_round_trip(tmp_path):
    img = torch.rand(5, 7, 3, generator=torch.Generator().manual_seed(0))
    save_png(img, tmp_path / "sub" / "x.png")
    back = load_png(tmp_path / "sub" / "x.png")
    assert back.shape == (5, 7, 3) and back.dtype == np.uint8
    assert np.array_equal(back, to_uint8(img))


def test_to_uint8_clips():
    assert to_uint8(np.array([-1.0, 0.5, 2.0])).tolist() == [0, 128, 255]
