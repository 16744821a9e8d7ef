import csv
import json

import numpy as np
import pytest
import torch

from priorlift.camera import CameraPose
from priorlift.errors import NoObjectError
from priorlift.field import RadianceField
from priorlift.io import load_checkpoint, load_png, save_checkpoint, to_uint8
from priorlift.mock import SphereTarget, TargetOracle, self_target_oracle
from priorlift.pipeline import (
    Backends,
    RunReport,
    Stage1Report,
    Streams,
    init_prior_field,
    make_schedule,
    mock_backends,
    multiview_disagreement,
    preprocess,
    render_turntable,
    run,
    stage1_self_prior,
    stage2_control_distill,
    turntable_poses,
    write_deltas_csv,
)

from conftest import small_config, solid_sphere

FAST_RUN = [
    "termination.max_iters=60",
    "termination.checkpoint_interval=20",
    "stage2_iters=6",
    "turntable_views=4",
]


def params(field):
    return torch.cat([p.detach().reshape(-1) for p in field.parameters()]).clone()


class Failing:
    """Oracle wrapper that raises on the n-th call."""

    supports_condition = True
    supports_text = True

    def __init__(self, inner, fail_at):
        self.inner, self.fail_at, self.calls = inner, fail_at, 0
        self.requires_condition = getattr(inner, "requires_condition", False)

    def predict_noise(self, *args, **kwargs):
        self.calls += 1
        if self.calls >= self.fail_at:
            raise RuntimeError("backend went away")
        return self.inner.predict_noise(*args, **kwargs)


def test_streams_are_reproducible_and_independent():
    a, b = Streams(5), Streams(5)
    assert np.array_equal(a.numpy("camera1").random(4), b.numpy("camera1").random(4))
    assert not np.array_equal(a.numpy("camera1").random(4), a.numpy("camera2").random(4))
    assert torch.equal(torch.randn(3, generator=a.torch("noise1")), torch.randn(3, generator=b.torch("noise1")))
    assert Streams(5).integer("learned_init") != Streams(6).integer("learned_init")


def test_preprocess_modes():
    cfg = small_config()
    b = mock_backends(cfg)
    dist, probe = preprocess(cfg, b.generator, b.scorer)
    assert probe is not None
    assert tuple(dist.probabilities) == pytest.approx((0.6875, 0.0475, 0.2651), abs=1e-4)
    dist, probe = preprocess(small_config("viewpoint.adaptive=false"), b.generator, b.scorer)
    assert probe is None and tuple(dist.probabilities) == pytest.approx((1 / 3, 1 / 3, 1 / 3))


def test_zero_signal_leaves_field_unchanged():
    cfg = small_config("field.stratified=false", "termination.checkpoint_interval=1000")
    field = init_prior_field(cfg)
    before = params(field)
    oracle = self_target_oracle(field, make_schedule(cfg), cfg.field.samples_per_ray)
    stage1_self_prior(cfg, oracle, field_=field, max_iters=10)
    assert torch.allclose(params(field), before, atol=1e-4, rtol=0)


def test_stage1_is_deterministic():
    cfg = small_config("termination.checkpoint_interval=10", "termination.max_iters=40")
    oracle = mock_backends(cfg).stage1_oracle
    f1, r1 = stage1_self_prior(cfg, oracle)
    f2, r2 = stage1_self_prior(cfg, oracle)
    assert r1.deltas == r2.deltas and len(r1.deltas) == 4
    assert r1.score_trace == r2.score_trace
    assert torch.equal(params(f1), params(f2))


def test_stage1_no_object_raises():
    cfg = small_config("termination.checkpoint_interval=10")
    oracle = TargetOracle(lambda cam, w, h: torch.ones(h, w, 3), make_schedule(cfg))
    empty = RadianceField.create(16, density=-20.0, dtype=torch.float32)
    with pytest.raises(NoObjectError, match="no object"):
        stage1_self_prior(cfg, oracle, field_=empty, max_iters=20)


def test_stage1_sds_moves_toward_target():
    cfg = small_config("termination.checkpoint_interval=1000")
    truth = SphereTarget(0.6)
    oracle = TargetOracle(truth, make_schedule(cfg))
    poses = [CameraPose(a, 10.0, 3.25) for a in (-150, -90, -30, 30, 90, 150)]
    field = init_prior_field(cfg)
    start = multiview_disagreement(field, truth, poses, 32, 32, 32)
    trace = []
    stage1_self_prior(cfg, oracle, field_=field, max_iters=300, ignore_termination=True,
                      callback=lambda it, f: trace.append(multiview_disagreement(f, truth, poses, 32, 32, 32))
                      if it % 100 == 0 else None)
    assert trace[0] < start and trace[-1] < 0.25 * start
    assert trace == sorted(trace, reverse=True)


def _stage2(cfg, **kwargs):
    prior = solid_sphere(16, dtype=torch.float64 if cfg.field.dtype == "float64" else torch.float32)
    oracle = mock_backends(cfg).stage2_oracle
    return prior, stage2_control_distill(cfg, prior, oracle, **kwargs)


def test_stage2_traces_and_prior_invariance():
    cfg = small_config()
    prior, (final, rep) = _stage2(cfg, iterations=8)
    assert rep.iterations == 8
    assert len(rep.score_trace) == len(rep.learned_loss_trace) == len(rep.lambda_trace) == 8
    assert rep.lambda_trace[0] == 0.5 and all(0.5 <= x <= 0.75 for x in rep.lambda_trace)
    assert rep.prior_digest_before == rep.prior_digest_after == prior.digest()
    assert not any(p.requires_grad for p in final.parameters())


def test_lambda_zero_matches_plain_sds():
    steps = {}
    for mode in ("weighted", "sds"):
        cfg = small_config("field.dtype=float64", f"guidance.stage2_score={mode}")
        seen = []
        _stage2(cfg, iterations=6, lambda_override=0.0 if mode == "weighted" else None,
                callback=lambda it, f, lam: seen.append(params(f)))
        steps[mode] = seen
    for a, b in zip(steps["weighted"], steps["sds"]):
        assert (a - b).abs().max().item() <= 1e-9


def test_stage2_abort_checkpoint(tmp_path):
    cfg = small_config()
    prior = solid_sphere(16)
    oracle = Failing(mock_backends(cfg).stage2_oracle, fail_at=4)
    ckpt = tmp_path / "abort.ckpt"
    with pytest.raises(RuntimeError, match="went away"):
        stage2_control_distill(cfg, prior, oracle, iterations=10, abort_checkpoint=ckpt)
    assert load_checkpoint(ckpt).grid_resolution == 16


def test_turntable_poses():
    poses = turntable_poses(small_config())
    assert [p.azimuth for p in poses] == [-180.0 + 30.0 * k for k in range(12)]
    assert {(p.elevation, p.distance, p.fov) for p in poses} == {(15.0, 3.25, 40.0)}


def test_deltas_csv(tmp_path):
    rep = Stage1Report(deltas=[(100, 0.25, False), (200, None, False), (300, 0.05, True)])
    write_deltas_csv(rep, tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows == [["checkpoint_iter", "delta", "decision"], ["100", "0.25", "continue"],
                    ["200", "", "continue"], ["300", "0.05", "stop"]]


def test_full_run_artifacts_and_rerender(tmp_path):
    cfg = small_config(*FAST_RUN)
    report = run(cfg, tmp_path, with_conditions=True)
    assert report.status == "ok", report.error
    for rel in ("config.echo", "report.json", "deltas.csv", "checkpoints/prior.ckpt", "checkpoints/final.ckpt",
                "renders/turntable_003.png", "conditions/edge_000.png", "conditions/normal_003.png"):
        assert (tmp_path / rel).exists(), rel
    saved = RunReport.from_json((tmp_path / "report.json").read_text())
    assert saved.stage2["iterations"] == 6 and len(saved.turntable_poses) == 4
    frames = render_turntable(load_checkpoint(tmp_path / "checkpoints" / "final.ckpt"), cfg)
    for k, img in enumerate(frames):
        assert np.array_equal(to_uint8(img), load_png(tmp_path / "renders" / f"turntable_{k:03d}.png"))


def test_external_prior_skips_stage1(tmp_path):
    save_checkpoint(solid_sphere(16), tmp_path / "ext.ckpt")
    cfg = small_config(*FAST_RUN, f"external_prior={tmp_path / 'ext.ckpt'}")
    out = tmp_path / "out"
    report = run(cfg, out)
    assert report.status == "ok"
    assert report.stage1["skipped"] is True
    assert not (out / "deltas.csv").exists()
    assert (out / "checkpoints" / "prior.ckpt").read_bytes() == (tmp_path / "ext.ckpt").read_bytes()


def test_failed_run_writes_partial_report(tmp_path):
    cfg = small_config(*FAST_RUN)
    base = mock_backends(cfg)
    backends = Backends(base.stage1_oracle, Failing(base.stage2_oracle, fail_at=3), base.generator, base.scorer)
    report = run(cfg, tmp_path, backends)
    assert report.status == "failed" and report.error.startswith("stage2: RuntimeError")
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["status"] == "failed" and saved["stage1"]["iterations"] > 0 and saved["stage2"] is None
    assert "backend went away" in saved["traceback"]
    assert (tmp_path / "checkpoints" / "prior.ckpt").exists()
    assert (tmp_path / "checkpoints" / "stage2_abort.ckpt").exists()
    assert not (tmp_path / "checkpoints" / "final.ckpt").exists()
