"""
Two-stage optimisation with offline oracles
===========================================

Stage 1 fits a coarse self-prior to an analytic sphere oracle and stops on
the boundary-integrity metric. Stage 2 distils a fresh field under the
prior's edge condition. Takes under a minute on one CPU core.
"""

import torch

from priorlift.camera import CameraPose
from priorlift.config import config_from_text
from priorlift.field import render_density_mask
from priorlift.pipeline import mock_backends, preprocess, stage1_self_prior, stage2_control_distill

config = config_from_text("", [
    "field.grid_resolution=16",
    "field.width=32",
    "field.height=32",
    "field.samples_per_ray=32",
])
backends = mock_backends(config)
dist, _ = preprocess(config, backends.generator, backends.scorer)

prior, s1 = stage1_self_prior(config, backends.stage1_oracle, dist)
print(f"stage 1 stopped by {s1.reason} after {s1.iterations} iterations")
for it, delta, stop in s1.deltas:
    print(f"  iter {it:5d}  delta {delta:.4f}{'  <- stop' if stop else ''}")

final, s2 = stage2_control_distill(config, prior, backends.stage2_oracle, None, dist, iterations=300)
print(f"stage 2: {s2.iterations} iterations, lambda {s2.lambda_trace[0]} -> {s2.lambda_trace[-1]:.4f}")
print("prior untouched:", s2.prior_digest_before == s2.prior_digest_after)


def iou(a, b):
    return (a & b).sum().item() / max((a | b).sum().item(), 1)


# Geometry maintenance: the stage-2 silhouette should track the prior's.
for az in (-135, -45, 45, 135):
    cam = CameraPose(az, 20.0, 3.25)
    a = render_density_mask(final, cam, 32, 32, 64) > 0.5
    b = render_density_mask(prior, cam, 32, 32, 64) > 0.5
    print(f"azimuth {az:5d}: IoU with prior {iou(a, b):.3f}")
