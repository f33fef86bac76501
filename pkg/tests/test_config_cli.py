import json
import subprocess
import sys

import numpy as np
import pytest

from gfmkit import cli, config, controllers, plant, simkit
from gfmkit.config import (ConfigError, format_element, load_controller,
                           load_params, load_scenario, parse_element,
                           write_controller, write_params_template,
                           write_scenario)


def run_cli(args):
    return cli.main(args)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_params_template_round_trip(tmp_path, params):
    path = tmp_path / "ref.params"
    write_params_template(path)
    p, sp, d = load_params(path)
    for f in ("omega_b", "Lf", "Cf", "Lg", "Rg", "Rf", "Cdc", "Dp", "Dq", "Vg"):
        assert getattr(p, f) == pytest.approx(getattr(params, f), rel=1e-12)
    assert sp.Pref == 0.5 and sp.Vdcref == pytest.approx(1.0)
    assert d.wg == 1.0


def test_params_pu_entries(tmp_path):
    path = tmp_path / "pu.params"
    path.write_text("Lf = 0.0174 pu\nDp = 0.02 pu\nRf = 0 si\n")
    p, sp, d = load_params(path)
    assert p.Lf == 0.0174
    assert p.Dp == 0.02
    assert p.Rf == 0.0


def test_params_si_pu_equivalence(tmp_path):
    a = tmp_path / "si.params"
    a.write_text("Lg = 0.002 si\n")
    b = tmp_path / "pu.params"
    pa = load_params(a)[0]
    b.write_text(f"Lg = {pa.Lg!r} pu\n")
    pb = load_params(b)[0]
    assert pa.Lg == pb.Lg


def test_params_errors(tmp_path):
    bad = tmp_path / "bad.params"
    bad.write_text("Lf 0.002 si\n")
    with pytest.raises(ConfigError):
        load_params(bad)
    bad.write_text("nosuchkey = 1 pu\n")
    with pytest.raises(ConfigError):
        load_params(bad)
    bad.write_text("Dp = 0.01 si\n")       # droop slopes are dimensionless
    with pytest.raises(ConfigError):
        load_params(bad)
    with pytest.raises(ConfigError):
        load_params(tmp_path / "missing.params")


def test_element_parse_format_round_trip():
    cases = [
        controllers.make_element("P", k=0.01),
        controllers.make_element("PI", k=90.0, T=0.225),
        controllers.make_element("IF", k=0.01, T=0.16722),
        controllers.make_element("O", k=1.0, T=0.5, xi=0.7),
        controllers.make_element(
            "P", k=0.01,
            feedback_only=controllers.make_element("IF", k=1.0, T=0.167)),
        controllers.ZERO,
    ]
    for el in cases:
        assert parse_element(format_element(el)) == el
    with pytest.raises(ConfigError):
        parse_element("P(q=1)")
    with pytest.raises(ConfigError):
        parse_element("whatever")


def test_controller_file_preset_form(tmp_path, params):
    path = tmp_path / "ctl.gfc"
    path.write_text("preset = vsg-2\nkpdc = 90\nkidc = 400\n")
    spec = load_controller(path, params)
    assert spec.name == "vsg-2"
    assert spec.element(0, 0).k == 90.0


def test_controller_file_gains_form(tmp_path, params):
    path = tmp_path / "opt.gfc"
    K = controllers.reference_gains()
    write_controller(path, preset="mimo-gfm", gains=K)
    spec = load_controller(path, params)
    ref = controllers.gains_to_phi(K, params)
    assert spec.grid == ref.grid


def test_controller_file_grid_form_round_trip(tmp_path, params):
    spec = controllers.preset("droop-5", params)
    path = tmp_path / "grid.gfc"
    write_controller(path, spec=spec)
    back = load_controller(path, params)
    assert back.grid == spec.grid


def test_controller_file_invalid_gain(tmp_path, params):
    path = tmp_path / "bad.gfc"
    K = controllers.reference_gains()
    text = ["preset = mimo-gfm"]
    for f in controllers.GainVector.FIELDS:
        v = getattr(K, f) if f != "k22" else -1.0
        text.append(f"{f} = {v!r}")
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(ConfigError):
        load_controller(path, params)


def test_scenario_file_round_trip(tmp_path):
    sc = simkit.wg_step()
    path = tmp_path / "wg.scn"
    write_scenario(path, sc)
    back = load_scenario(path)
    assert back.duration == sc.duration and back.dt == sc.dt
    assert back.events == sc.events
    assert back.setpoints.Pref == sc.setpoints.Pref


def test_scenario_overrides(tmp_path):
    path = tmp_path / "s.scn"
    path.write_text("duration = 1.0\ndt = 1e-4\nPref = 0.3\n"
                    "event = 0.5 Pref 0.8\n")
    sc = load_scenario(path)
    assert sc.setpoints.Pref == 0.3
    assert sc.setpoints.i0 == 0.3
    assert sc.events[0].value == 0.8
    path.write_text("dt = 1e-4\n")
    with pytest.raises(ConfigError):
        load_scenario(path)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@pytest.fixture()
def short_scenario(tmp_path):
    path = tmp_path / "short.scn"
    path.write_text("duration = 0.4\ndt = 1e-4\n"
                    "event = 0.1 omega_g 0.998\n")
    return str(path)


def test_cli_simulate(tmp_path, short_scenario):
    out = tmp_path / "run"
    rc = run_cli(["simulate", "--preset", "vsg-2", "--scenario", short_scenario,
                  "--out", str(out)])
    assert rc == 0
    assert (out / "timeseries.csv").exists()
    assert (out / "metrics.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["params"]["Dp"] == 0.01
    assert manifest["scenario"]["events"] == [[0.1, "omega_g", 0.998]]


def test_cli_simulate_missing_params_file(tmp_path):
    rc = run_cli(["simulate", "--preset", "vsg-2", "--params", "nope.params",
                  "--out", str(tmp_path / "x")])
    assert rc == 1


def test_cli_simulate_requires_one_controller(tmp_path):
    rc = run_cli(["simulate", "--out", str(tmp_path / "x")])
    assert rc == 1
    rc = run_cli(["simulate", "--preset", "vsg-2", "--controller", "a.gfc",
                  "--out", str(tmp_path / "x")])
    assert rc == 1


def test_cli_simulate_deterministic(tmp_path, short_scenario):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli(["simulate", "--preset", "droop-5", "--scenario",
                    short_scenario, "--out", str(out1)]) == 0
    assert run_cli(["simulate", "--preset", "droop-5", "--scenario",
                    short_scenario, "--out", str(out2)]) == 0
    assert (out1 / "timeseries.csv").read_bytes() == \
        (out2 / "timeseries.csv").read_bytes()
    assert (out1 / "metrics.csv").read_bytes() == \
        (out2 / "metrics.csv").read_bytes()


def test_cli_synthesize_zero_iters(tmp_path):
    out = tmp_path / "syn"
    rc = run_cli(["synthesize", "--max-iters", "0", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["gains"]["kpdc"] == 90.0
    assert report["stable"] is True
    assert (out / "history.csv").exists()
    # the emitted controller file loads back
    p = plant.default_params(include_filter_resistance=True)
    spec = load_controller(out / "controller.gfc", p)
    assert spec.name == "mimo-gfm"


def test_cli_synthesize_rejects_bad_gain_file(tmp_path):
    path = tmp_path / "bad.gfc"
    K = controllers.initial_gains()
    lines = ["preset = mimo-gfm"]
    for f in controllers.GainVector.FIELDS:
        lines.append(f"{f} = {-2.0 if f == 'k22' else getattr(K, f)!r}")
    path.write_text("\n".join(lines) + "\n")
    rc = run_cli(["synthesize", "--controller", str(path), "--max-iters", "0",
                  "--out", str(tmp_path / "o")])
    assert rc == 1


def test_cli_compare(tmp_path, short_scenario):
    out = tmp_path / "cmp"
    rc = run_cli(["compare", "--preset", "vsg-2", "--preset", "droop-5",
                  "--preset", "mimo-gfm", "--scenario", short_scenario,
                  "--out", str(out)])
    assert rc == 0
    lines = (out / "comparison.csv").read_text().strip().splitlines()
    assert lines[0].startswith("controller,scenario,channel")
    assert len(lines) == 1 + 3 * 5          # three controllers x five outputs
    for label in ("vsg-2", "droop-5", "mimo-gfm"):
        assert (out / f"timeseries_{label}_short.csv").exists()


def test_cli_compare_multiple_scenarios(tmp_path, short_scenario):
    # controllers x scenarios rows, one block per scenario
    other = tmp_path / "short2.scn"
    other.write_text("duration = 0.3\ndt = 1e-4\nevent = 0.1 Pref 0.6\n")
    out = tmp_path / "cmp2"
    rc = run_cli(["compare", "--preset", "vsg-2", "--preset", "droop-5",
                  "--preset", "mimo-gfm",
                  "--scenario", short_scenario, "--scenario", str(other),
                  "--out", str(out)])
    assert rc == 0
    lines = (out / "comparison.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * 3 * 5      # 6 controller-scenario runs
    assert (out / "timeseries_vsg-2_short2.csv").exists()


def test_cli_compare_needs_two(tmp_path):
    rc = run_cli(["compare", "--preset", "vsg-2", "--out", str(tmp_path / "c")])
    assert rc == 1


def test_cli_simulate_power_tracks_reference(tmp_path):
    # long enough for the slow coupled-design mode to settle: the metrics
    # file then shows the power pinned at the stepped reference
    path = tmp_path / "long.scn"
    path.write_text("duration = 6.0\ndt = 2e-5\nPref = 0.5\n"
                    "event = 1.0 Pref 1.0\n")
    out = tmp_path / "long"
    rc = run_cli(["simulate", "--preset", "mimo-gfm", "--scenario", str(path),
                  "--out", str(out)])
    assert rc == 0
    rows = {}
    for line in (out / "metrics.csv").read_text().strip().splitlines()[1:]:
        parts = line.split(",")
        rows[parts[0]] = parts
    assert rows["p"][1] == "True"
    assert abs(float(rows["p"][2]) - 1.0) <= 1e-3


def test_cli_norm_stable_and_unstable(tmp_path):
    out = tmp_path / "norm_ok"
    rc = run_cli(["norm", "--preset", "mimo-gfm", "--out", str(out)])
    assert rc == 0
    lines = (out / "freq_response.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 4001
    first = float(lines[1].split(",")[0])
    last = float(lines[-1].split(",")[0])
    assert first == pytest.approx(1e-4) and last == pytest.approx(1e6)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stable"] is True
    # static droop destabilizes this plant: distinct exit status
    rc = run_cli(["norm", "--preset", "droop-1", "--out",
                  str(tmp_path / "norm_bad")])
    assert rc == 3


def test_cli_norm_zero_controller_reports_unstable(tmp_path):
    # with no feedback at all the DC link is open-loop unstable; the rank-
    # deficient equilibrium (any synchronized angle works) must still solve
    zero = tmp_path / "zero.gfc"
    zero.write_text("# all-zero grid\n")
    rc = run_cli(["norm", "--controller", str(zero),
                  "--out", str(tmp_path / "norm_zero")])
    assert rc == 3


def test_cli_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "gfmkit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
