"""Run configuration: nested dataclasses read from and written to INI files.

Each sub-config is one INI section; top-level scalars live in ``[run]``.
Overrides use dotted keys (``field.grid_resolution=16``) and win over file
values. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, get_type_hints

from .errors import ConfigError


@dataclass
class FieldConfig:
    grid_resolution: int = 64
    bound: float = 1.0
    background: Tuple[float, ...] = (1.0, 1.0, 1.0)
    width: int = 64
    height: int = 64
    samples_per_ray: int = 64
    stratified: bool = True
    valid_opacity: float = 0.5
    # stage-1 init: centred blob of pre-activation density
    init_peak: float = 4.0
    init_radius: float = 0.5
    init_floor: float = -6.0
    # stage-2 init: uniform low-density haze (pre-activation)
    haze_level: float = -3.0
    dtype: str = "float32"


@dataclass
class ViewpointConfig:
    adaptive: bool = True
    timesteps: Tuple[int, ...] = tuple(range(10, 101, 10))
    elevation_min: float = -10.0
    elevation_max: float = 45.0
    distance_min: float = 3.0
    distance_max: float = 3.5
    fov: float = 40.0
    stage2_sampling: str = "adaptive"  # or "uniform"


@dataclass
class GuidanceConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    weighting: str = "sigma2"
    t_min: float = 0.02
    t_max: float = 0.98
    cfg_pretrained: float = 7.5
    cfg_learned: float = 1.0
    lambda_start: float = 0.5
    lambda_end: float = 0.75
    lambda_ramp_iters: int = 5000
    learned_lr: float = 1e-3
    learned_hidden: int = 32
    # "weighted" (control score), "sds" (conditioned SDS baseline) or "vsd"
    stage2_score: str = "weighted"


@dataclass
class TerminationConfig:
    threshold: float = 0.1
    window: int = 3
    checkpoint_interval: int = 100
    max_iters: int = 5000
    eval_poses: int = 4
    aggregation: str = "opacity"


@dataclass
class MockConfig:
    target: str = "sphere"  # or "ellipsoid"
    radii: Tuple[float, ...] = (0.6, 0.6, 0.6)
    bias: float = 0.0
    stage2_color: Tuple[float, ...] = (0.9, 0.35, 0.2)


@dataclass
class RunConfig:
    prompt: str = "a corgi"
    seed: int = 0
    stage1_lr: float = 30.0
    stage2_lr: float = 10.0
    stage2_iters: int = 15000
    # "mock" (offline target oracles) or "remote:HOST:PORT"
    oracle: str = "mock"
    external_prior: str = ""
    turntable_views: int = 12
    turntable_elevation: float = 15.0
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    viewpoint: ViewpointConfig = dataclasses.field(default_factory=ViewpointConfig)
    guidance: GuidanceConfig = dataclasses.field(default_factory=GuidanceConfig)
    termination: TerminationConfig = dataclasses.field(default_factory=TerminationConfig)
    mock: MockConfig = dataclasses.field(default_factory=MockConfig)

    def validate(self) -> "RunConfig":
        from .guidance import WEIGHTINGS
        from .termination import AGGREGATIONS

        f, v, g, t = self.field, self.viewpoint, self.guidance, self.termination
        checks = [
            (bool(self.prompt), "run.prompt must be non-empty"),
            (self.stage2_iters >= 0, "run.stage2_iters must be >= 0"),
            (self.stage1_lr > 0 and self.stage2_lr > 0, "learning rates must be > 0"),
            (f.grid_resolution >= 2, "field.grid_resolution must be >= 2"),
            (min(f.width, f.height, f.samples_per_ray) >= 1, "field image size and samples must be >= 1"),
            (len(f.background) == 3, "field.background needs three values"),
            (0 < f.valid_opacity < 1, "field.valid_opacity must lie in (0, 1)"),
            (f.dtype in ("float32", "float64"), "field.dtype must be float32 or float64"),
            (v.elevation_min <= v.elevation_max, "viewpoint elevation range is inverted"),
            (0 < v.distance_min <= v.distance_max, "viewpoint distance range is invalid"),
            (v.stage2_sampling in ("adaptive", "uniform"), "viewpoint.stage2_sampling must be adaptive|uniform"),
            (g.weighting in WEIGHTINGS, f"guidance.weighting must be one of {sorted(WEIGHTINGS)}"),
            (0 <= g.t_min < g.t_max <= 1, "guidance t range must satisfy 0 <= t_min < t_max <= 1"),
            (g.stage2_score in ("weighted", "sds", "vsd"), "guidance.stage2_score must be weighted|sds|vsd"),
            (t.aggregation in AGGREGATIONS, f"termination.aggregation must be one of {AGGREGATIONS}"),
            (t.eval_poses >= 1, "termination.eval_poses must be >= 1"),
            (self.mock.target in ("sphere", "ellipsoid"), "mock.target must be sphere|ellipsoid"),
            (len(self.mock.radii) == 3, "mock.radii needs three values"),
            (0 <= self.mock.bias <= 1, "mock.bias must lie in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if not (self.oracle == "mock" or self.oracle.startswith("remote:")):
            raise ConfigError("run.oracle must be 'mock' or 'remote:HOST:PORT'")
        from .termination import TerminationPolicy
        from .viewpoint import TimestepSet

        TimestepSet(tuple(v.timesteps)).check_range(g.num_steps)
        TerminationPolicy(t.threshold, t.window, t.checkpoint_interval, t.max_iters)
        return self


SECTIONS = ("field", "viewpoint", "guidance", "termination", "mock")


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        origin = getattr(typ, "__origin__", None)
        if origin is tuple:
            inner = typ.__args__[0]
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            return tuple(_parse_value(p, inner, key) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"unsupported config type for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _scalar_fields(obj):
    hints = get_type_hints(type(obj))
    return [(f.name, hints[f.name]) for f in dataclasses.fields(obj) if f.name not in SECTIONS]


def _assign(obj, key: str, raw: str, where: str):
    hints = dict(_scalar_fields(obj))
    if key not in hints:
        raise ConfigError(f"unknown config key {where}.{key}")
    setattr(obj, key, _parse_value(raw, hints[key], f"{where}.{key}"))


def apply_override(config: RunConfig, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like key=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) == 1 or (len(parts) == 2 and parts[0] == "run"):
        _assign(config, parts[-1], raw, "run")
    elif len(parts) == 2 and parts[0] in SECTIONS:
        _assign(getattr(config, parts[0]), parts[1], raw, parts[0])
    else:
        raise ConfigError(f"unknown config key {key!r}")


def config_from_text(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    config = RunConfig()
    for section in parser.sections():
        if section == "run":
            target = config
        elif section in SECTIONS:
            target = getattr(config, section)
        else:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            _assign(target, key, raw, section)
    for o in overrides:
        apply_override(config, o)
    return config.validate()


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return config_from_text(text, overrides)


def config_to_text(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {k: _format_value(getattr(config, k)) for k, _ in _scalar_fields(config)}
    for section in SECTIONS:
        sub = getattr(config, section)
        parser[section] = {k: _format_value(getattr(sub, k)) for k, _ in _scalar_fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)
