"""Two-stage optimisation: self-prior via SDS, then control-based distillation."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .camera import CameraPose
from .condition import paired_conditions
from .config import RunConfig, config_to_dict, config_to_text
from .errors import NoObjectError
from .field import RadianceField, blob_field, render
from .guidance import (
    GuidedOracle,
    LambdaSchedule,
    LearnedScore,
    NoiseSchedule,
    add_noise,
    lambda_at,
    learned_score_update,
    sds_score,
    timestep_weight,
    vsd_score,
    weighted_score,
)
from .io import load_external_prior, save_checkpoint, save_png
from .termination import TerminationPolicy, delta_from_render, should_terminate
from .viewpoint import (
    ConfidenceProbe,
    SamplerConfig,
    TimestepSet,
    ViewDistribution,
    probe_view_confidence,
    sample_camera,
    uniform_distribution,
    view_distribution,
)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class Streams:
    """Independent, seeded random streams, one per consumer.

    Keeping them separate means e.g. the learned-score updates never perturb
    the camera or noise sequence seen by the field.
    """

    NAMES = ("camera1", "time1", "noise1", "jitter1", "probe1",
             "camera2", "time2", "noise2", "jitter2", "learned", "learned_init")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        self._seqs = dict(zip(self.NAMES, children))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seqs[name])

    def torch(self, name: str) -> torch.Generator:
        return torch.Generator().manual_seed(int(self._seqs[name].generate_state(1, np.uint64)[0] >> np.uint64(1)))

    def integer(self, name: str) -> int:
        return int(self._seqs[name].generate_state(1)[0])


def make_schedule(config: RunConfig) -> NoiseSchedule:
    g = config.guidance
    return NoiseSchedule(g.num_steps, g.beta_start, g.beta_end)


def sampler_config(config: RunConfig) -> SamplerConfig:
    v = config.viewpoint
    return SamplerConfig((v.elevation_min, v.elevation_max), (v.distance_min, v.distance_max), v.fov)


def termination_policy(config: RunConfig) -> TerminationPolicy:
    t = config.termination
    return TerminationPolicy(t.threshold, t.window, t.checkpoint_interval, t.max_iters)


def descend(field: RadianceField, image: torch.Tensor, image_grad: torch.Tensor, lr: float) -> None:
    """One plain gradient step: chain the image-space term through the renderer."""
    for p in field.parameters():
        p.grad = None
    (image_grad.detach() * image).sum().backward()
    with torch.no_grad():
        for p in field.parameters():
            if p.grad is not None:
                p -= lr * p.grad
                p.grad = None


def preprocess(config: RunConfig, generator=None, scorer=None) -> Tuple[ViewDistribution, Optional[ConfidenceProbe]]:
    """View distribution for sampling: confidence-probed if adaptive, else uniform."""
    if not config.viewpoint.adaptive or generator is None or scorer is None:
        return uniform_distribution(), None
    probe = probe_view_confidence(generator, scorer, config.prompt, TimestepSet(tuple(config.viewpoint.timesteps)))
    return view_distribution(probe.confidences), probe


@dataclass
class Stage1Report:
    deltas: List[Tuple[int, Optional[float], bool]] = field(default_factory=list)
    score_trace: List[float] = field(default_factory=list)
    reason: Optional[str] = None
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "deltas": [{"iter": i, "delta": d, "stop": s} for i, d, s in self.deltas],
            "score_trace": self.score_trace,
            "termination_reason": self.reason,
            "iterations": self.iterations,
        }


def _checkpoint_delta(field_, config, rng, dist, sampler) -> Optional[float]:
    f = config.field
    values = []
    for _ in range(config.termination.eval_poses):
        cam = sample_camera(dist, rng, config=sampler)
        with torch.no_grad():
            out = render(field_, cam, f.width, f.height, f.samples_per_ray, with_normals=False)
        d = delta_from_render(out, config.termination.aggregation, f.valid_opacity)
        if d is not None:
            values.append(d)
    return float(np.mean(values)) if values else None


def init_prior_field(config: RunConfig) -> RadianceField:
    f = config.field
    b = f.bound
    return blob_field(
        f.grid_resolution, f.init_peak, f.init_radius, f.init_floor,
        bounds=((-b, -b, -b), (b, b, b)), background_color=f.background, dtype=DTYPES[f.dtype],
    )


def stage1_self_prior(
    config: RunConfig,
    oracle,
    dist: Optional[ViewDistribution] = None,
    *,
    streams: Optional[Streams] = None,
    field_: Optional[RadianceField] = None,
    max_iters: Optional[int] = None,
    ignore_termination: bool = False,
    callback: Optional[Callable[[int, RadianceField], None]] = None,
) -> Tuple[RadianceField, Stage1Report]:
    """Optimise the self-prior with SDS under view-distribution sampling.

    Stops when the boundary-integrity metric stays below threshold for
    ``window`` consecutive checkpoints, or at the iteration budget.
    ``ignore_termination`` keeps optimising to ``max_iters`` regardless
    (used to study over-optimisation).
    """
    f = config.field
    streams = streams or Streams(config.seed)
    dist = dist or uniform_distribution()
    policy = termination_policy(config)
    budget = max_iters if max_iters is not None else policy.max_iters
    policy = replace(policy, max_iters=budget)
    schedule = make_schedule(config)
    sampler = sampler_config(config)
    guided = GuidedOracle(oracle, config.guidance.cfg_pretrained)
    cam_rng, t_rng, probe_rng = streams.numpy("camera1"), streams.numpy("time1"), streams.numpy("probe1")
    noise_gen, jitter_gen = streams.torch("noise1"), streams.torch("jitter1")
    dtype = DTYPES[f.dtype]

    theta = field_ if field_ is not None else init_prior_field(config)
    theta.requires_grad_(True)
    report = Stage1Report()
    for it in range(1, budget + 1):
        cam = sample_camera(dist, cam_rng, config=sampler)
        t = schedule.sample_timestep(t_rng, config.guidance.t_min, config.guidance.t_max)
        out = render(theta, cam, f.width, f.height, f.samples_per_ray,
                     generator=jitter_gen if f.stratified else None, with_normals=False)
        noise = torch.randn(out.rgb.shape, generator=noise_gen, dtype=dtype)
        grad = sds_score(guided, out.rgb, t, config.prompt, noise, schedule, config.guidance.weighting, camera=cam)
        descend(theta, out.rgb, grad, config.stage1_lr)
        report.score_trace.append(float(grad.pow(2).mean().sqrt()))
        report.iterations = it
        if callback is not None:
            callback(it, theta)
        if it % policy.checkpoint_interval == 0:
            delta = _checkpoint_delta(theta, config, probe_rng, dist, sampler)
            history = [d for _, d, _ in report.deltas] + [delta]
            stop, reason = should_terminate(history, policy, it)
            if ignore_termination:
                stop, reason = it >= budget, ("budget" if it >= budget else None)
            report.deltas.append((it, delta, stop))
            log.info("stage1 iter %d delta=%s stop=%s", it, delta, reason)
            if stop:
                report.reason = reason
                break
    if report.reason is None:
        report.reason = "budget"
    theta.requires_grad_(False)
    last = report.deltas[-1][1] if report.deltas else _checkpoint_delta(theta, config, probe_rng, dist, sampler)
    if last is None and report.reason == "budget":
        raise NoObjectError(
            f"stage 1 ended at its budget ({report.iterations} iterations) with no object in view; "
            f"delta history {[d for _, d, _ in report.deltas][-5:]}"
        )
    return theta, report


@dataclass
class Stage2Report:
    score_trace: List[float] = field(default_factory=list)
    learned_loss_trace: List[float] = field(default_factory=list)
    lambda_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    prior_digest_before: str = ""
    prior_digest_after: str = ""

    def to_dict(self) -> dict:
        return {
            "score_trace": self.score_trace,
            "learned_loss_trace": self.learned_loss_trace,
            "lambda_trace": self.lambda_trace,
            "iterations": self.iterations,
            "prior_digest_before": self.prior_digest_before,
            "prior_digest_after": self.prior_digest_after,
        }


def init_stage2_field(config: RunConfig) -> RadianceField:
    f = config.field
    b = f.bound
    return RadianceField.create(
        f.grid_resolution, ((-b, -b, -b), (b, b, b)), f.background,
        density=f.haze_level, color=0.0, dtype=DTYPES[f.dtype],
    )


def stage2_control_distill(
    config: RunConfig,
    prior: RadianceField,
    pretrained,
    learned: Optional[LearnedScore] = None,
    dist: Optional[ViewDistribution] = None,
    *,
    streams: Optional[Streams] = None,
    iterations: Optional[int] = None,
    lambda_override: Optional[float] = None,
    callback: Optional[Callable[[int, RadianceField, float], None]] = None,
    abort_checkpoint: Optional[Path] = None,
) -> Tuple[RadianceField, Stage2Report]:
    """Distil a fresh field under the prior's edge condition.

    Each iteration: one field step on ``w(t)`` times the chosen score
    (weighted control score by default), then one learned-score step on the
    current render with its normal-map condition. The prior is read-only.
    If anything fails mid-loop the current field is written to
    ``abort_checkpoint`` (when given) before the error propagates.
    """
    f, g = config.field, config.guidance
    streams = streams or Streams(config.seed)
    if config.viewpoint.stage2_sampling == "uniform" or dist is None:
        dist = uniform_distribution()
    n_iters = config.stage2_iters if iterations is None else iterations
    schedule = make_schedule(config)
    sampler = sampler_config(config)
    lam_schedule = LambdaSchedule(g.lambda_start, g.lambda_end, g.lambda_ramp_iters)
    guided = GuidedOracle(pretrained, g.cfg_pretrained)
    if learned is None and g.stage2_score != "sds":
        learned = LearnedScore(lr=g.learned_lr, seed=streams.integer("learned_init"),
                               num_steps=g.num_steps, hidden=g.learned_hidden)
    learned_oracle = GuidedOracle(learned, g.cfg_learned) if learned is not None else None
    cam_rng, t_rng = streams.numpy("camera2"), streams.numpy("time2")
    noise_gen, jitter_gen = streams.torch("noise2"), streams.torch("jitter2")
    l_rng, l_gen = streams.numpy("learned"), streams.torch("learned")

    report = Stage2Report(prior_digest_before=prior.digest())
    theta = init_stage2_field(config).requires_grad_(True)
    try:
        _stage2_loop(theta, report, config, prior, guided, learned, learned_oracle, dist, n_iters, lambda_override,
                     callback, schedule, sampler, lam_schedule, cam_rng, t_rng, noise_gen, jitter_gen, l_rng, l_gen)
    except Exception:
        if abort_checkpoint is not None:
            save_checkpoint(theta, abort_checkpoint)
        raise
    theta.requires_grad_(False)
    report.prior_digest_after = prior.digest()
    return theta, report


def _stage2_loop(theta, report, config, prior, guided, learned, learned_oracle, dist, n_iters, lambda_override,
                 callback, schedule, sampler, lam_schedule, cam_rng, t_rng, noise_gen, jitter_gen, l_rng, l_gen):
    f, g = config.field, config.guidance
    mode = g.stage2_score
    dtype = DTYPES[f.dtype]
    for it in range(n_iters):
        cam = sample_camera(dist, cam_rng, config=sampler)
        t = schedule.sample_timestep(t_rng, g.t_min, g.t_max)
        pc = paired_conditions(theta, prior, cam, f.width, f.height, f.samples_per_ray,
                               generator=jitter_gen if f.stratified else None, threshold=f.valid_opacity)
        x = pc.rgb
        noise = torch.randn(x.shape, generator=noise_gen, dtype=dtype)
        edge = pc.edge.as_image()
        normal = pc.normal.data
        weight = timestep_weight(schedule, t, g.weighting)
        if mode == "sds":
            lam = 0.0
            grad = sds_score(guided, x, t, config.prompt, noise, schedule, g.weighting, condition=edge, camera=cam)
        else:
            x_t = add_noise(x.detach(), t, noise, schedule)
            if mode == "vsd":
                lam = 1.0
                grad = vsd_score(guided, learned_oracle, x_t, t, config.prompt, normal, schedule, g.weighting,
                                 pretrained_condition=edge, camera=cam)
            else:
                lam = lambda_at(lam_schedule, it) if lambda_override is None else float(lambda_override)
                grad = weight * weighted_score(guided, learned_oracle, x_t, edge, normal, t,
                                               config.prompt, noise, lam, camera=cam)
        descend(theta, x, grad, config.stage2_lr)
        report.score_trace.append(float(grad.pow(2).mean().sqrt()))
        report.lambda_trace.append(lam)
        if learned is not None:
            t2 = schedule.sample_timestep(l_rng, g.t_min, g.t_max)
            noise2 = torch.randn(x.shape, generator=l_gen, dtype=dtype)
            report.learned_loss_trace.append(
                learned_score_update(learned, x.detach(), t2, normal, config.prompt, noise2, schedule)
            )
        report.iterations = it + 1
        if callback is not None:
            callback(it, theta, lam)


def turntable_poses(config: RunConfig, n: Optional[int] = None) -> List[CameraPose]:
    n = config.turntable_views if n is None else n
    v = config.viewpoint
    d = (v.distance_min + v.distance_max) / 2.0
    return [CameraPose(-180.0 + 360.0 * k / n, config.turntable_elevation, d, v.fov) for k in range(n)]


def render_turntable(field_: RadianceField, config: RunConfig, out_dir: Optional[Path] = None) -> List[np.ndarray]:
    f = config.field
    frames = []
    for k, cam in enumerate(turntable_poses(config)):
        with torch.no_grad():
            img = render(field_, cam, f.width, f.height, f.samples_per_ray, with_normals=False).rgb
        frames.append(img)
        if out_dir is not None:
            save_png(img, Path(out_dir) / f"turntable_{k:03d}.png")
    return frames


@dataclass
class Backends:
    stage1_oracle: object
    stage2_oracle: object
    generator: Optional[Callable] = None
    scorer: Optional[Callable] = None


def mock_backends(config: RunConfig) -> Backends:
    """Offline backends: analytic target oracles and the fixture probe pair."""
    from .mock import ConditionedTargetOracle, EllipsoidTarget, FixtureGenerator, FixtureScorer, TargetOracle

    schedule = make_schedule(config)
    m = config.mock
    target = EllipsoidTarget(radii=tuple(m.radii), background=tuple(config.field.background))
    return Backends(
        stage1_oracle=TargetOracle(target, schedule, bias=m.bias),
        stage2_oracle=ConditionedTargetOracle(schedule, color=tuple(m.stage2_color),
                                              background=tuple(config.field.background)),
        generator=FixtureGenerator(),
        scorer=FixtureScorer(),
    )


def build_backends(config: RunConfig) -> Backends:
    if config.oracle == "mock":
        return mock_backends(config)
    from .remote import RemoteOracle

    _, host, port = config.oracle.split(":", 2)
    base = mock_backends(config)
    oracle = RemoteOracle(host, int(port))
    return Backends(oracle, oracle, base.generator, base.scorer)


@dataclass
class RunReport:
    status: str = "running"
    error: Optional[str] = None
    traceback: Optional[str] = None
    view_distribution: Optional[dict] = None
    probe_scores: Optional[dict] = None
    stage1: Optional[dict] = None
    stage2: Optional[dict] = None
    turntable_poses: Optional[list] = None
    artifacts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def write_deltas_csv(report: Stage1Report, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint_iter", "delta", "decision"])
        for it, d, stop in report.deltas:
            w.writerow([it, "" if d is None else repr(d), "stop" if stop else "continue"])


def dump_conditions(final: RadianceField, prior: RadianceField, config: RunConfig, out_dir: Path) -> List[str]:
    """Write the edge and normal condition images at every turntable pose."""
    f = config.field
    paths = []
    for k, cam in enumerate(turntable_poses(config)):
        with torch.no_grad():
            pc = paired_conditions(final, prior, cam, f.width, f.height, f.samples_per_ray, threshold=f.valid_opacity)
        for kind, img in (("edge", pc.edge.as_image()), ("normal", pc.normal.data)):
            name = f"{kind}_{k:03d}.png"
            save_png(img, Path(out_dir) / name)
            paths.append(f"conditions/{name}")
    return paths


def run(config: RunConfig, out_dir, backends: Optional[Backends] = None, *, with_conditions: bool = False) -> RunReport:
    """Preprocess, stage 1 (or external prior), stage 2, turntable; persist all of it.

    Layout under ``out_dir``: ``config.echo``, ``report.json``, ``deltas.csv``,
    ``checkpoints/{prior,final}.ckpt`` and ``renders/turntable_###.png``.
    Failures are recorded in the report (status ``failed``) rather than raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(config_to_text(config))
    report = RunReport(config=config_to_dict(config))
    report.artifacts["config"] = "config.echo"
    streams = Streams(config.seed)
    clock = time.perf_counter()
    stage = "setup"
    try:
        backends = backends or build_backends(config)
        stage = "preprocess"
        dist, probe = preprocess(config, backends.generator, backends.scorer)
        report.view_distribution = dist.to_dict()
        if probe is not None:
            report.probe_scores = {k: {str(t): s for t, s in v.items()} for k, v in probe.scores.items()}
        report.wall_clock["preprocess_s"] = time.perf_counter() - clock

        stage = "stage1"
        if config.external_prior:
            prior = load_external_prior(config.external_prior, dtype=DTYPES[config.field.dtype])
            report.stage1 = {"skipped": True, "external_prior": str(config.external_prior)}
        else:
            prior, s1 = stage1_self_prior(config, backends.stage1_oracle, dist, streams=streams)
            report.stage1 = s1.to_dict()
            write_deltas_csv(s1, out / "deltas.csv")
            report.artifacts["deltas"] = "deltas.csv"
        save_checkpoint(prior, out / "checkpoints" / "prior.ckpt")
        report.artifacts["prior"] = "checkpoints/prior.ckpt"
        report.wall_clock["stage1_s"] = time.perf_counter() - clock

        stage = "stage2"
        final, s2 = stage2_control_distill(config, prior, backends.stage2_oracle, None, dist, streams=streams,
                                           abort_checkpoint=out / "checkpoints" / "stage2_abort.ckpt")
        report.stage2 = s2.to_dict()
        save_checkpoint(final, out / "checkpoints" / "final.ckpt")
        report.artifacts["final"] = "checkpoints/final.ckpt"
        report.wall_clock["stage2_s"] = time.perf_counter() - clock

        stage = "turntable"
        render_turntable(final, config, out / "renders")
        report.artifacts["turntable"] = [f"renders/turntable_{k:03d}.png" for k in range(config.turntable_views)]
        report.turntable_poses = [c.to_dict() for c in turntable_poses(config)]
        if with_conditions:
            stage = "conditions"
            report.artifacts["conditions"] = dump_conditions(final, prior, config, out / "conditions")
        report.status = "ok"
    except Exception as exc:  # noqa: BLE001 - recorded in the report
        log.error("run failed during %s: %s", stage, exc)
        report.status = "failed"
        report.error = f"{stage}: {type(exc).__name__}: {exc}"
        report.traceback = traceback.format_exc()
    report.wall_clock["total_s"] = time.perf_counter() - clock
    (out / "report.json").write_text(report.to_json())
    return report


@dataclass
class OverfitResult:
    seed: int
    terminated_at: int
    reason: str
    disagreement_terminated: float
    disagreement_extended: float


def multiview_disagreement(field_: RadianceField, truth, poses, width: int, height: int, samples_per_ray: int) -> float:
    """Mean squared error between renders and unbiased targets over a pose set."""
    errs = []
    with torch.no_grad():
        for cam in poses:
            img = render(field_, cam, width, height, samples_per_ray, with_normals=False).rgb
            errs.append(float(((img.double() - truth(cam, width, height).double()) ** 2).mean()))
    return float(np.mean(errs))


def overfitting_diagnostic(config: RunConfig, seeds, factor: int = 4, n_poses: int = 12) -> List[OverfitResult]:
    """Compare terminated self-priors against runs extended to ``factor`` times as long.

    Stage 1 runs under the configured (view-biased) mock oracle; disagreement
    is measured against the unbiased target on a ring of held-out poses. The
    extended run shares the terminated run's seed and random streams.
    """
    from .mock import EllipsoidTarget

    f = config.field
    truth = EllipsoidTarget(radii=tuple(config.mock.radii), background=tuple(f.background))
    v = config.viewpoint
    poses = [CameraPose(-180.0 + 360.0 * (k + 0.5) / n_poses, 10.0, (v.distance_min + v.distance_max) / 2, v.fov)
             for k in range(n_poses)]
    results = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        backends = mock_backends(cfg)
        dist, _ = preprocess(cfg, backends.generator, backends.scorer)
        prior, rep = stage1_self_prior(cfg, backends.stage1_oracle, dist)
        # Same seed and streams: the extended run retraces the terminated one
        # for its first ``rep.iterations`` steps, then keeps going.
        extended, _ = stage1_self_prior(cfg, backends.stage1_oracle, dist, max_iters=factor * rep.iterations,
                                        ignore_termination=True)
        results.append(OverfitResult(
            seed=int(seed),
            terminated_at=rep.iterations,
            reason=rep.reason,
            disagreement_terminated=multiview_disagreement(prior, truth, poses, f.width, f.height, f.samples_per_ray),
            disagreement_extended=multiview_disagreement(extended, truth, poses, f.width, f.height, f.samples_per_ray),
        ))
    return results
