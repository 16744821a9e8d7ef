"""Command-line entry point.

Exit status: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures. Errors are also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .config import config_to_text, load_config
from .errors import ConfigError, FormatError, InvalidInputError
from .evaluation import MeanIntensityScorer, UniformPreferenceScorer, evaluate_manifest, read_manifest, write_metrics
from .io import load_checkpoint, load_external_prior, load_png, save_checkpoint

USAGE_ERRORS = (ConfigError, InvalidInputError, FormatError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, 2)
        raise SystemExit(2)


def _emit_error(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. field.grid_resolution=16 (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="priorlift", description="Two-stage text-to-3D optimisation with a geometric self-prior.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("probe-views", parents=[common], help="probe per-view confidence and print p*")
    p.add_argument("--prompt")

    sub.add_parser("stage1", parents=[common], help="optimise the self-prior only")

    p = sub.add_parser("stage2", parents=[common], help="distil a field against an existing prior")
    p.add_argument("--prior", type=Path, help="prior checkpoint or .npy occupancy grid")
    p.add_argument("--dump-conditions", action="store_true")

    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("--dump-conditions", action="store_true", help="also write edge/normal condition images")

    p = sub.add_parser("render", parents=[common], help="render a turntable from a checkpoint or run directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--run", type=Path, help="run directory (uses its config.echo and final checkpoint)")

    p = sub.add_parser("eval", parents=[common], help="JR / PS / CS table from a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    return parser


def _config(args, extra: Optional[List[str]] = None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "prompt", None):
        overrides.append(f"prompt={args.prompt}")
    return load_config(args.config, overrides + (extra or []))


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_probe_views(args) -> int:
    config = _config(args)
    backends = pipeline.build_backends(config)
    dist, probe = pipeline.preprocess(config, backends.generator, backends.scorer)
    result = {"prompt": config.prompt, "view_distribution": dist.to_dict()}
    if probe is not None:
        result["scores"] = {k: {str(t): s for t, s in v.items()} for k, v in probe.scores.items()}
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        _require_out(args)
        (args.out / "probe.json").write_text(text)
    return 0


def cmd_stage1(args) -> int:
    config = _config(args)
    out = _require_out(args)
    (out / "config.echo").write_text(config_to_text(config))
    backends = pipeline.build_backends(config)
    dist, _ = pipeline.preprocess(config, backends.generator, backends.scorer)
    report = {"status": "ok", "view_distribution": dist.to_dict()}
    try:
        prior, s1 = pipeline.stage1_self_prior(config, backends.stage1_oracle, dist)
    except Exception as exc:
        report.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        _write_json(out / "report.json", report)
        raise
    save_checkpoint(prior, out / "checkpoints" / "prior.ckpt")
    pipeline.write_deltas_csv(s1, out / "deltas.csv")
    report["stage1"] = s1.to_dict()
    _write_json(out / "report.json", report)
    return 0


def cmd_stage2(args) -> int:
    config = _config(args)
    out = _require_out(args)
    source = args.prior or config.external_prior
    if not source:
        raise UsageError("stage2 needs --prior or run.external_prior")
    prior = load_external_prior(source, dtype=pipeline.DTYPES[config.field.dtype])
    (out / "config.echo").write_text(config_to_text(config))
    backends = pipeline.build_backends(config)
    dist, _ = pipeline.preprocess(config, backends.generator, backends.scorer)
    report = {"status": "ok", "prior": str(source)}
    try:
        final, s2 = pipeline.stage2_control_distill(config, prior, backends.stage2_oracle, None, dist,
                                                    abort_checkpoint=out / "checkpoints" / "stage2_abort.ckpt")
    except Exception as exc:
        report.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        _write_json(out / "report.json", report)
        raise
    save_checkpoint(final, out / "checkpoints" / "final.ckpt")
    report["stage2"] = s2.to_dict()
    if args.dump_conditions:
        report["conditions"] = pipeline.dump_conditions(final, prior, config, out / "conditions")
    _write_json(out / "report.json", report)
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    out = _require_out(args)
    report = pipeline.run(config, out, with_conditions=args.dump_conditions)
    print(json.dumps({"status": report.status, "error": report.error, "out": str(out)}, sort_keys=True))
    return 0 if report.status == "ok" else 1


def cmd_render(args) -> int:
    out = _require_out(args)
    if args.run is not None:
        config = load_config(args.run / "config.echo", args.overrides)
        ckpt = args.run / "checkpoints" / "final.ckpt"
    else:
        config = _config(args)
        ckpt = args.checkpoint
    field = load_checkpoint(ckpt, dtype=pipeline.DTYPES[config.field.dtype])
    pipeline.render_turntable(field, config, out / "renders")
    return 0


def cmd_eval(args) -> int:
    out = _require_out(args)
    rows = read_manifest(args.manifest)
    table = evaluate_manifest(rows, UniformPreferenceScorer(), MeanIntensityScorer(), loader=load_png)
    write_metrics(table, out)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "probe-views": cmd_probe_views,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "run": cmd_run,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *USAGE_ERRORS) as exc:
        _emit_error(type(exc).__name__, str(exc), 2)
        return 2
    except Exception as exc:  # noqa: BLE001 - mapped to exit status 1
        _emit_error(type(exc).__name__, str(exc), 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
