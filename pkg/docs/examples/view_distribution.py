"""
Adaptive viewpoint sampling
===========================

Probe per-view confidence with the offline fixture pair, turn it into a
view distribution and check the sampler's frequencies.
"""

import numpy as np

from priorlift.mock import FixtureGenerator, FixtureScorer
from priorlift.viewpoint import VIEW_LABELS, classify_azimuth, probe_view_confidence, sample_camera, view_distribution

generator, scorer = FixtureGenerator(), FixtureScorer()
probe = probe_view_confidence(generator, scorer, "a corgi")
print("generator calls:", len(generator.calls))

dist = view_distribution(probe.confidences)
for label, s, p in zip(VIEW_LABELS, dist.confidences, dist.probabilities):
    print(f"{label:>5}: confidence {s:+.4f}  p = {100 * p:.2f}%")

# Empirical frequencies over 20k cameras.
rng = np.random.default_rng(0)
labels = [classify_azimuth(sample_camera(dist, rng).azimuth) for _ in range(20_000)]
freq = np.bincount(labels, minlength=3) / len(labels)
print("sampled:", {k: round(float(v), 4) for k, v in zip(VIEW_LABELS, freq)})
