import pytest
from hypothesis import given, settings, strategies as st

from priorlift.config import RunConfig, config_from_text, config_to_dict, config_to_text, load_config
from priorlift.errors import ConfigError


def test_defaults_validate():
    c = config_from_text("")
    assert c.guidance.cfg_pretrained == 7.5 and c.guidance.cfg_learned == 1.0
    assert c.termination.threshold == 0.1 and c.termination.window == 3 and c.termination.checkpoint_interval == 100
    assert c.stage2_iters == 15000
    assert c.viewpoint.timesteps == tuple(range(10, 101, 10))
    assert (c.guidance.lambda_start, c.guidance.lambda_end, c.guidance.lambda_ramp_iters) == (0.5, 0.75, 5000)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "demo.cfg"
    path.write_text("[run]\nprompt = a red car\nseed = 3\n\n[field]\ngrid_resolution = 24\nbackground = 0, 0, 0\n")
    c = load_config(path, ["field.grid_resolution=16", "seed=7", "viewpoint.adaptive=false"])
    assert c.prompt == "a red car" and c.seed == 7
    assert c.field.grid_resolution == 16 and c.field.background == (0.0, 0.0, 0.0)
    assert c.viewpoint.adaptive is False


@pytest.mark.parametrize("text, overrides", [
    ("[bogus]\nx = 1\n", []),
    ("[field]\nnope = 1\n", []),
    ("", ["field.nope=1"]),
    ("", ["nope=1"]),
    ("", ["a.b.c=1"]),
    ("", ["seed"]),
    ("", ["field.grid_resolution=abc"]),
    ("", ["viewpoint.adaptive=maybe"]),
    ("", ["guidance.weighting=cubic"]),
    ("", ["termination.threshold=0"]),
    ("", ["viewpoint.timesteps=10,5"]),
    ("", ["viewpoint.timesteps=10,2000"]),
    ("", ["oracle=gpu"]),
    ("", ["prompt="]),
    ("not an ini", []),
])
def test_rejections(text, overrides):
    with pytest.raises(ConfigError):
        config_from_text(text, overrides)


def test_echo_round_trip():
    c = config_from_text("", ["prompt=a corgi, wearing a hat", "field.background=0.25, 0.5, 1.0",
                              "guidance.beta_end=0.012", "run.stage1_lr=12.5"])
    again = config_from_text(config_to_text(c))
    assert config_to_dict(again) == config_to_dict(c)
    assert config_to_text(again) == config_to_text(c)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100, allow_nan=False), st.booleans(),
       st.text(st.characters(whitelist_categories=("L", "N", "Zs")), min_size=1).map(str.strip).filter(bool))
@settings(max_examples=50, deadline=None)
def test_echo_round_trip_property(seed, lr, adaptive, prompt):
    c = RunConfig(seed=seed, stage1_lr=lr, prompt=prompt)
    c.viewpoint.adaptive = adaptive
    assert config_to_dict(config_from_text(config_to_text(c))) == config_to_dict(c)
