"""Evaluation aggregations: Janus rate, preference-score and text-image score averages.

Scorers are plain callables, so real models plug in behind the same
interface as the test doubles:

* preference scorer: ``scorer(prompt, images) -> sequence of k probabilities``,
  one per competing method's image of the same view;
* text-image scorer: ``scorer(prompt, image) -> float``.

Scores are reported on the scorer's own scale; no percentage rescaling.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .camera import CameraPose
from .errors import InvalidInputError

JANUS_CATEGORIES = ("multi-part", "content drift", "paper-thin")

# Single-view text-image scoring pose.
CLIP_POSE = CameraPose(azimuth=30.0, elevation=45.0, distance=3.25)


@dataclass(frozen=True)
class JanusAnnotation:
    prompt: str
    janus: bool
    category: Optional[str] = None

    def __post_init__(self):
        if self.category is not None and self.category not in JANUS_CATEGORIES:
            raise InvalidInputError(f"unknown Janus category {self.category!r}; expected one of {JANUS_CATEGORIES}")


def janus_rate(annotations: Sequence) -> float:
    """Percentage of flagged objects, rounded to two decimals.

    Accepts booleans or :class:`JanusAnnotation` records.
    """
    flags = [a.janus if isinstance(a, JanusAnnotation) else bool(a) for a in annotations]
    if not flags:
        raise InvalidInputError("janus_rate needs at least one annotation")
    return round(100.0 * sum(flags) / len(flags), 2)


def janus_breakdown(annotations: Sequence[JanusAnnotation]) -> Dict[str, int]:
    counts = {c: 0 for c in JANUS_CATEGORIES}
    for a in annotations:
        if a.janus and a.category:
            counts[a.category] += 1
    return counts


@dataclass
class EvaluationBatch:
    """Renders per method and prompt, plus optional Janus labels per method."""

    prompts: List[str]
    renders: Dict[str, Dict[str, List]]  # method -> prompt -> N views
    annotations: Dict[str, List[JanusAnnotation]] = field(default_factory=dict)

    @property
    def methods(self) -> List[str]:
        return list(self.renders)

    def validate(self, same_views: bool = True) -> int:
        if not self.prompts or not self.renders:
            raise InvalidInputError("evaluation batch is empty")
        counts = set()
        for method, per_prompt in self.renders.items():
            for y in self.prompts:
                if y not in per_prompt:
                    raise InvalidInputError(f"method {method!r} has no renders for prompt {y!r}")
                if not per_prompt[y]:
                    raise InvalidInputError(f"method {method!r} has no views for prompt {y!r}")
                counts.add(len(per_prompt[y]))
        if same_views and len(counts) != 1:
            raise InvalidInputError(f"view counts differ across methods or prompts: {sorted(counts)}")
        return counts.pop()


def pick_score(scorer: Callable, batch: EvaluationBatch) -> Dict[str, float]:
    """Per-method preference score averaged over views, then prompts."""
    n = batch.validate(same_views=True)
    methods = batch.methods
    per_prompt = np.zeros((len(batch.prompts), len(methods)))
    for i, y in enumerate(batch.prompts):
        acc = np.zeros(len(methods))
        for v in range(n):
            probs = np.asarray(scorer(y, [batch.renders[m][y][v] for m in methods]), dtype=float)
            if probs.shape != (len(methods),):
                raise InvalidInputError(f"scorer returned {probs.shape}, expected one score per method")
            acc += probs
        per_prompt[i] = acc / n
    return dict(zip(methods, per_prompt.mean(axis=0).tolist()))


def _same_pose(a: CameraPose, b: CameraPose, tol: float = 1e-6) -> bool:
    return abs(a.azimuth - b.azimuth) <= tol and abs(a.elevation - b.elevation) <= tol


def clip_score(
    scorer: Callable,
    prompts: Sequence[str],
    renders: Mapping[str, object],
    poses: Optional[Mapping[str, CameraPose]] = None,
    canonical: CameraPose = CLIP_POSE,
) -> float:
    """Mean text-image score over prompts, one render each at the canonical pose.

    ``poses`` (optional) records where each render was taken; any render not
    at the canonical azimuth and elevation is rejected.
    """
    if not prompts:
        raise InvalidInputError("clip_score needs at least one prompt")
    total = 0.0
    for y in prompts:
        if y not in renders:
            raise InvalidInputError(f"no render for prompt {y!r}")
        if poses is not None and not _same_pose(poses[y], canonical):
            raise InvalidInputError(
                f"render for {y!r} taken at azimuth {poses[y].azimuth}, elevation {poses[y].elevation}; "
                f"expected azimuth {canonical.azimuth}, elevation {canonical.elevation}"
            )
        total += float(scorer(y, renders[y]))
    return total / len(prompts)


@dataclass
class ManifestRow:
    method: str
    prompt: str
    views: List[str]
    clip_view: Optional[str]
    janus: Optional[bool]
    category: Optional[str]


def _parse_bool(raw: str) -> Optional[bool]:
    raw = raw.strip().lower()
    if raw == "":
        return None
    if raw in ("1", "true", "yes"):
        return True
    if raw in ("0", "false", "no"):
        return False
    raise InvalidInputError(f"cannot read {raw!r} as a Janus flag")


def read_manifest(path) -> List[ManifestRow]:
    """CSV with columns ``method, prompt, views, clip_view, janus, category``.

    ``views`` lists image paths separated by ``;``. Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"method", "prompt", "views"} - set(reader.fieldnames or ())
        if missing:
            raise InvalidInputError(f"manifest lacks columns {sorted(missing)}")
        for rec in reader:
            views = [str(base / v.strip()) for v in (rec.get("views") or "").split(";") if v.strip()]
            clip_view = (rec.get("clip_view") or "").strip()
            rows.append(ManifestRow(
                method=rec["method"].strip(),
                prompt=rec["prompt"].strip(),
                views=views,
                clip_view=str(base / clip_view) if clip_view else None,
                janus=_parse_bool(rec.get("janus") or ""),
                category=(rec.get("category") or "").strip() or None,
            ))
    if not rows:
        raise InvalidInputError(f"{path}: manifest has no rows")
    return rows


def evaluate_manifest(rows: Sequence[ManifestRow], pick_scorer=None, clip_scorer=None, loader=None) -> Dict[str, dict]:
    """Per-method JR / PS / CS table. Missing scorers or labels leave ``None``."""
    loader = loader or (lambda p: p)
    prompts = list(dict.fromkeys(r.prompt for r in rows))
    renders: Dict[str, Dict[str, list]] = defaultdict(dict)
    clip_renders: Dict[str, Dict[str, object]] = defaultdict(dict)
    labels: Dict[str, list] = defaultdict(list)
    for r in rows:
        renders[r.method][r.prompt] = [loader(v) for v in r.views]
        if r.clip_view:
            clip_renders[r.method][r.prompt] = loader(r.clip_view)
        if r.janus is not None:
            labels[r.method].append(JanusAnnotation(r.prompt, r.janus, r.category if r.janus else None))
    table = {m: {"JR": None, "PS": None, "CS": None} for m in renders}
    for m in table:
        if labels[m]:
            table[m]["JR"] = janus_rate(labels[m])
            table[m]["janus_categories"] = janus_breakdown(labels[m])
    if pick_scorer is not None:
        for m, s in pick_score(pick_scorer, EvaluationBatch(prompts, dict(renders))).items():
            table[m]["PS"] = s
    if clip_scorer is not None:
        for m in table:
            if clip_renders[m]:
                table[m]["CS"] = clip_score(clip_scorer, prompts, clip_renders[m])
    return table


def write_metrics(table: Mapping[str, dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "JR", "PS", "CS"])
        for m, row in table.items():
            w.writerow([m] + ["" if row.get(k) is None else row[k] for k in ("JR", "PS", "CS")])
    (out / "metrics.json").write_text(json.dumps(table, indent=2, sort_keys=True))


class UniformPreferenceScorer:
    """Preference stand-in: equal probability for every competing image."""

    def __call__(self, prompt, images):
        return [1.0 / len(images)] * len(images)


class MeanIntensityScorer:
    """Deterministic text-image stand-in: mean pixel intensity in [0, 1]."""

    def __call__(self, prompt, image):
        arr = np.asarray(image, dtype=float)
        if arr.size == 0 or not np.all(np.isfinite(arr)):
            return math.nan
        return float(arr.mean() / (255.0 if arr.max() > 1.0 else 1.0))
