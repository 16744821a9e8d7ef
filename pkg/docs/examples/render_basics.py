"""
Rendering a voxel field
=======================

Build a solid sphere on a 32^3 lattice, render it from a few cameras and
compare the opacity mask with the analytic silhouette.
"""

import math
import sys
from pathlib import Path

import torch

from priorlift.camera import CameraPose
from priorlift.field import RadianceField, inverse_softplus, render, render_density_mask
from priorlift.io import save_png
from priorlift.mock import SphereTarget

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "render_basics_out")

# Density parameters are pre-softplus, colours pre-sigmoid.
field = RadianceField.create(32, color=1.0)
r = field.node_positions().norm(dim=-1)
field.density_params = torch.where(r <= 0.6, torch.tensor(8.0), torch.tensor(-8.0))

# A constant-density box is the one case with a closed form: 1 - exp(-sigma L).
slab = RadianceField.create(4, background_color=(0, 0, 0), density=inverse_softplus(1.0), dtype=torch.float64)
opacity = render(slab, CameraPose(0, 0, 3, fov=1.0), 1, 1, 64).opacity.item()
print(f"slab opacity {opacity:.6f}, closed form {1 - math.exp(-2.0):.6f}")

# Silhouettes against the analytic sphere.
for az in (0, 90, 180):
    cam = CameraPose(az, 15.0, 3.2)
    out = render(field, cam, 64, 64, 64)
    save_png(out.rgb, out_dir / f"sphere_az{az:03d}.png")
    mask = render_density_mask(field, cam, 64, 64, 64) > 0.5
    truth = SphereTarget(0.6).silhouette(cam, 64, 64)
    print(f"azimuth {az:4d}: IoU {(mask & truth).sum().item() / (mask | truth).sum().item():.3f}")
