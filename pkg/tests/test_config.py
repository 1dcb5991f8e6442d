import numpy as np
import pytest

from twomode.config import ConfigError, RunConfig, load_config, parse_config
from twomode.hamiltonian import DEVICE_A, DEVICE_B, derive_energies


def test_defaults():
    cfg = parse_config("")
    assert cfg.params == DEVICE_A
    assert cfg.experiment.delays.size == 1000
    assert cfg.hash == RunConfig().hash


def test_units_converted():
    cfg = parse_config("""
device:
  E_J: 11000 MHz
  E_C: 0.5 GHz
  E_p: 200 MHz
experiment:
  detuning: 3500 kHz
  T2: 15000 ns
  delay_step: 80 ns
  delay_count: 500
  acquisition: 0.1 s
noise:
  qp_rate: 10 1/ms
""")
    assert cfg.params == DEVICE_A
    e = cfg.experiment
    assert (e.detuning, e.T2, e.acquisition_ms) == pytest.approx((3.5, 15.0, 100.0))
    assert e.delays[1] == pytest.approx(0.08) and e.delays.size == 500
    assert cfg.noise.qp_rate == pytest.approx(0.01)


def test_hash_semantic_identity():
    a = parse_config("device:\n  E_J: 11 GHz\n  E_C: 0.5 GHz\n  E_p: 0.2 GHz\n")
    b = parse_config("# comment\ndevice:\n  E_p: 200 MHz\n  E_C: 500 MHz\n  E_J: 11 GHz\n")
    assert a.hash == b.hash
    assert parse_config("seed: 1").hash != a.hash
    assert parse_config("output: elsewhere").hash == a.hash


def test_presets_and_capacitances():
    assert parse_config("device:\n  preset: B\n").params == DEVICE_B
    cfg = parse_config("device:\n  E_J: 11 GHz\n  C: 60 fF\n  C_m: 6 fF\n")
    assert (cfg.params.E_C, cfg.params.E_p) == pytest.approx(derive_energies(60, 6))


@pytest.mark.parametrize("text, line, fragment", [
    ("device:\n  E_J: 11\n  E_C: 0.5 GHz\n", 2, "no unit"),
    ("experiment:\n  T2: 15 GHz\n", 2, "convertible"),
    ("device:\n  preset: A\n  E_J: 1 GHz\n", 3, "not both"),
    ("foo: 1\n", 1, "unknown key"),
    ("experiment:\n  shots: 2.5\n", 2, "integer"),
    ("ramsey:\n  model: two-peak\n", 2, "choose from"),
    ("device:\n  E_J: 11 GHz\n  E_C: 0.5 GHz\n  E_p: 1.5 GHz\n", 2, "E_p"),
    ("scenario:\n  waypoints:\n    - {time: 0 min, x: 1 um}\n", 3, "waypoint"),
    ("sweep:\n  ratio_min: 30\n  ratio_max: 20\n", 2, "empty"),
    ("map:\n  file: nowhere.txt\n", 2, "does not exist"),
    ("seed: 1\nseed: 2\n", 2, "duplicate"),
    ("a: [1\n", 2, "YAML"),
])
def test_errors_are_line_anchored(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.yaml")
    assert exc.value.line == line
    assert str(exc.value).startswith(f"run.yaml:{line}:")
    assert fragment in str(exc.value)


def test_map_sources(tmp_path):
    from twomode.locator import GridSpec, save_map, surrogate_map
    save_map(surrogate_map(grid=GridSpec(100, 5)), tmp_path / "m.txt")
    (tmp_path / "c.yaml").write_text("map:\n  file: m.txt\n")
    assert load_config(tmp_path / "c.yaml").map_file == tmp_path / "m.txt"
    cfg = parse_config("map:\n  surrogate: {half_width: 500 um, step: 5 um}\n")
    assert cfg.grid == GridSpec(500.0, 5.0) and cfg.map_file is None
    with pytest.raises(ConfigError):
        parse_config("map:\n  file: m.txt\n  surrogate: {}\n", base=tmp_path)


def test_scenario_section():
    cfg = parse_config("""
scenario:
  duration: 2 h
  cadence: 120 s
  waypoints:
    - {time: 0 min, x: 200 um, y: 0 um}
    - {time: 60 min, x: 0.3 mm, y: 10 um}
  steps:
    - {time: 30 min, d_sigma: 0.2}
""")
    sc = cfg.scenario
    assert sc.duration == pytest.approx(120) and sc.cadence == pytest.approx(2)
    assert sc.waypoints[1].x == pytest.approx(300)
    assert sc.steps[0].d_sigma == 0.2
    assert np.allclose(sc.times[:3], [0, 2, 4])


def test_overrides(tmp_path):
    cfg = RunConfig().with_overrides(seed=7, output=tmp_path)
    assert cfg.seed == 7 and cfg.noise.seed == 7 and cfg.output == tmp_path
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(map_file=tmp_path / "none.txt")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.yaml")
