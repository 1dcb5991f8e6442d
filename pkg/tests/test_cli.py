import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from twomode.cli import main
from twomode.results import SCHEMAS, ResultBundle, Table

GOLDEN = Path(__file__).parent / "golden"
CONFIGS = GOLDEN / "configs"
sys.path.insert(0, str(GOLDEN))
from regenerate import CASES  # noqa: E402


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def same_cell(a, b):
    try:
        x, y = float(a), float(b)
    except ValueError:
        return a == b
    if math.isnan(x) or math.isnan(y):
        return math.isnan(x) and math.isnan(y)
    return math.isclose(x, y, rel_tol=1e-6, abs_tol=1e-9)


def same_json(a, b):
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(same_json(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return isinstance(b, list) and len(a) == len(b) and all(same_json(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return a is not None and b is not None and math.isclose(a, b, rel_tol=1e-6, abs_tol=1e-9)
    return a == b


# --- golden files ---------------------------------------------------------

def test_schemas_match_golden():
    assert json.loads((GOLDEN / "schemas.json").read_text()) == json.loads(json.dumps(SCHEMAS))


@pytest.mark.parametrize("case", sorted(CASES))
def test_golden_bundles(tmp_path, case):
    code, out = run(tmp_path, *CASES[case])
    assert code == 0
    ref = GOLDEN / case
    assert sorted(p.name for p in out.iterdir()) == sorted(p.name for p in ref.iterdir())
    for f in ref.glob("*.csv"):
        got, want = read_csv(out / f.name), read_csv(f)
        assert got[0] == want[0], f"{case}/{f.name} header drift"
        assert len(got) == len(want)
        for r_got, r_want in zip(got[1:], want[1:]):
            assert all(same_cell(a, b) for a, b in zip(r_got, r_want)), f"{case}/{f.name}: {r_got} != {r_want}"
    assert same_json(json.loads((out / "metrics.json").read_text()), json.loads((ref / "metrics.json").read_text()))
    got, want = (json.loads((d / "bundle.json").read_text()) for d in (out, ref))
    for key in ("command", "config_hash", "tables"):
        assert got[key] == want[key]


def test_every_table_validates_against_schema():
    for case in sorted(CASES):
        manifest = json.loads((GOLDEN / case / "bundle.json").read_text())
        schema = SCHEMAS[manifest["command"]]
        for name, cols in manifest["tables"].items():
            assert tuple(cols) == schema[name]
            assert all(c.endswith("]") and " [" in c for c in cols)


# --- reproducibility ------------------------------------------------------

def test_byte_identical_reruns(tmp_path):
    cfg = str(CONFIGS / "ramsey_four.yaml")
    _, a = run(tmp_path, "ramsey", "--config", cfg, name="a")
    _, b = run(tmp_path, "ramsey", "--config", cfg, name="b")
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_seed_override_changes_trace(tmp_path):
    cfg = str(CONFIGS / "ramsey_four.yaml")
    _, a = run(tmp_path, "ramsey", "--config", cfg, name="a")
    _, b = run(tmp_path, "ramsey", "--config", cfg, "--seed", "12", name="b")
    assert (a / "trace.csv").read_bytes() != (b / "trace.csv").read_bytes()
    assert json.loads((a / "bundle.json").read_text())["config_hash"] != \
        json.loads((b / "bundle.json").read_text())["config_hash"]


# --- command behaviour ----------------------------------------------------

def test_spectrum_device_a_values():
    rows = {r[0]: float(r[1]) for r in read_csv(GOLDEN / "spectrum_a" / "modes.csv")[1:]}
    assert rows["omega_delta"] == pytest.approx(5.4485, abs=1e-3)
    assert rows["omega_sigma"] == pytest.approx(6.6705, abs=1e-3)


def test_device_b_chi_smaller():
    a = {r[0]: float(r[1]) for r in read_csv(GOLDEN / "spectrum_a" / "modes.csv")[1:]}
    b = {r[0]: float(r[1]) for r in read_csv(GOLDEN / "spectrum_b" / "modes.csv")[1:]}
    assert b["chi"] < a["chi"]


def test_spectrum_degenerate_error_verbatim(tmp_path, capsys):
    code, out = run(tmp_path, "spectrum", "--config", str(CONFIGS / "device_ep0.yaml"))
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("spectrum: LabelingError:") and "degenerate" in err
    assert not out.exists()


def test_sweep_single_point_and_marker(tmp_path):
    cfg = tmp_path / "one.yaml"
    cfg.write_text("sweep:\n  ratio_min: 40\n  ratio_max: 40\n  count: 1\n  levels: [[0, 1]]\n")
    code, out = run(tmp_path, "dispersion-sweep", "--config", str(cfg))
    assert code == 0
    assert len(read_csv(out / "sweep.csv")) == 2
    rows = read_csv(GOLDEN / "sweep_small" / "sweep.csv")[1:]
    assert any(r[0] == "22" and r[-1] == "true" for r in rows)
    for lev in ("0", "1"):
        eps = [float(r[4]) for r in rows if r[3] == lev]
        assert all(b < a for a, b in zip(eps, eps[1:]))


def test_ramsey_four_peak_and_null():
    fit = {r[0]: float(r[1]) for r in read_csv(GOLDEN / "ramsey_four" / "fit.csv")[1:]}
    assert fit["df1"] == pytest.approx(0.8, abs=0.1) and fit["df2"] == pytest.approx(2.6, abs=0.1)
    null = json.loads((GOLDEN / "ramsey_null_b" / "metrics.json").read_text())
    assert not null["resolved"] and null["resolution_MHz"] == pytest.approx(0.01)


def test_track_short_scenario(tmp_path):
    code, out = run(tmp_path, "track", "--config", str(CONFIGS / "track_short.yaml"))
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["flagged"] == [2] and m["rms_ng"] < 0.01


def test_end2end_short_scenario(tmp_path):
    code, out = run(tmp_path, "end2end", "--config", str(CONFIGS / "end2end_short.yaml"))
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["rms_ng"] < 0.01 and m["hit_rate"] >= 0.8 and m["flagged"] == []
    assert len(read_csv(out / "localization.csv")) == 7


def test_localize_with_saved_map(tmp_path):
    from twomode.locator import GridSpec, save_map, surrogate_map
    path = tmp_path / "map.txt"
    save_map(surrogate_map(grid=GridSpec(500, 5)), path)
    code, out = run(tmp_path, "localize", "--map", str(path))
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["found"] and m["contains_truth"]
    assert read_csv(out / "contours.csv")[0] == list(SCHEMAS["localize"]["contours"])


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("device:\n  E_J: 11\n  E_C: 0.5 GHz\n")
    code, _ = run(tmp_path, "spectrum", "--config", str(bad))
    assert code == 2
    assert f"{bad}:2:" in capsys.readouterr().err
    code, _ = run(tmp_path, "localize", "--map", str(tmp_path / "missing.txt"))
    assert code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "twomode", "spectrum", "--out", str(tmp_path / "s")],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert (tmp_path / "s" / "levels.csv").exists()


def test_unknown_verb_rejected():
    with pytest.raises(SystemExit):
        main(["plot"])


# --- bundle plumbing ------------------------------------------------------

def test_table_requires_units():
    with pytest.raises(ValueError):
        Table(("energy",), [])
    with pytest.raises(ValueError):
        Table(("energy [GHz]",), [(1, 2)])


def test_bundle_rejects_schema_drift(tmp_path):
    b = ResultBundle("spectrum", "x", {"levels": Table(("m [1]",), [(0,)])})
    with pytest.raises(ValueError):
        b.write(tmp_path / "o")
