import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REFERENCE_NAMES
from graphon_teams.config import (ConfigError, ExperimentConfig, load_config, parse_config,
                                  reference_config, reference_config_path, serialize_config)
from graphon_teams.game import GameSpec


def test_empty_config_is_all_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.game == GameSpec()
    assert cfg.grid_n == 16 and cfg.solver.dt == 1e-3 and cfg.simulation.num_paths == 1000


def test_exponent_floats_are_numbers():
    cfg = parse_config("solver:\n  dt: 1e-2\n")
    assert cfg.solver.dt == 0.01


def test_zero_control_weight_is_named():
    with pytest.raises(ConfigError) as info:
        parse_config("game:\n  R11: 0\n")
    assert any("R11" in v and "R11 > 0" in v for v in info.value.violations)


def test_all_violations_are_listed():
    text = """
game:
  R22: -1
  Q1: -2
  M1: {kind: step, partition: [0, 1], values: [[3]]}
  bogus: 1
grid_n: 0
solver: {dt: 0.3}
simulation: {num_paths: 0}
outputs: {flatten_pi: maybe}
extra: true
"""
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msgs = "\n".join(info.value.violations)
    for needle in ("R22", "Q1", "[-1, 1]", "game.bogus", "grid_n", "solver.dt", "num_paths",
                   "flatten_pi", "config.extra"):
        assert needle in msgs, needle


def test_syntax_error_has_position():
    with pytest.raises(ConfigError, match=r"line 2, column 8"):
        parse_config("game:\n  A1: 1: 2\n")


def test_wrong_types_are_reported():
    with pytest.raises(ConfigError, match="expected a real number"):
        parse_config("game:\n  A1: fast\n")
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("grid_n: 2.5\n")


def test_noise_modes_must_fit_grid():
    with pytest.raises(ConfigError, match="noise modes"):
        parse_config("grid_n: 4\n")


def test_modes_used_bounded_by_truncation():
    with pytest.raises(ConfigError, match="modes_used"):
        parse_config("simulation: {modes_used: 17}\n")


@pytest.mark.parametrize("name", REFERENCE_NAMES)
def test_reference_configs_round_trip(name):
    cfg = reference_config(name)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_load_from_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(reference_config_path("step").read_text())
    assert load_config(path) == reference_config("step")
    with pytest.raises(KeyError):
        reference_config_path("huge")


def test_digest_tracks_content():
    a = ExperimentConfig()
    b = dataclasses.replace(a, grid_n=32)
    assert a.digest() != b.digest()
    assert a.digest() == ExperimentConfig().digest()


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5, allow_nan=False), st.floats(0.01, 10), st.integers(1, 10 ** 6),
       st.sampled_from([0.5, 1.0, 2.0]), st.booleans())
def test_round_trip_property(a1, r22, seed, horizon, flat):
    text = (f"game: {{A1: {a1!r}, R22: {r22!r}, T: {horizon!r}}}\n"
            f"simulation: {{seed: {seed}}}\noutputs: {{flatten_pi: {str(flat).lower()}}}\n")
    cfg = parse_config(text)
    assert parse_config(serialize_config(cfg)) == cfg
