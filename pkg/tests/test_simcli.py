import json

import numpy as np
import pytest

from dtcbf.simcli import (EXIT_CONFIG, EXIT_SAFE, EXIT_UNSAFE, TRACE_COLUMNS, ConfigError, main, parse_scenario,
                          read_trace, run_scenario, summarize_sweep, sweep_rates)

SHORT_UNSAFE = """
[plant]
preset = slow
[controller]
kind = lqr
rate = 50
[run]
duration = 3
substeps = 4
x0 = -1, 0, 0, 0
"""

QUIET = """
[plant]
preset = fast
[controller]
kind = lqr
rate = 50
[run]
duration = 1
"""


def write(tmp_path, text, name="sc"):
    path = tmp_path / f"{name}.ini"
    path.write_text(text)
    return str(path)


def test_parse_full_schema():
    sc = parse_scenario("""
[plant]
preset = fast
body_mass = 0.5
[controller]
kind = rti+tube_cbf
rate = 100
horizon = 15
q = 10, 1, 1, 0.1
[safety]
theta_max = 0.25
tightening = 0.3
[reference]
steps = 2.0:0.7 6:0.0
[run]
duration = 8
x0 = 0 0 0 0
delay = yes
""")
    assert sc.plant.params().body_mass == 0.5
    assert sc.controller.horizon == 15 and sc.controller.q == (10, 1, 1, 0.1)
    assert sc.safety.theta_max == 0.25 and sc.run.delay is True
    assert sc.reference(1.9)[0] == 0.0 and sc.reference(2.0)[0] == 0.7 and sc.reference(7.0)[0] == 0.0


@pytest.mark.parametrize("text", [
    "[plant]\ncolour = red\n",
    "[extra]\nx = 1\n",
    "[controller]\nkind = pid\n",
    "[controller]\nrate = -3\n",
    "[run]\nduration = 0\n",
    "[reference]\nsteps = 2.0-0.7\n",
    "[reference]\nsteps = 3:1 1:0\n",
    "[safety]\ntightening = 1.5\n",
    "[controller]\nhorizon = many\n",
    "[plant]\npreset = medium\n",
    "[plant]\nbody_mass = -2\n",
])
def test_bad_scenarios_rejected(text):
    with pytest.raises(ConfigError):
        parse_scenario(text)


def test_exit_codes(tmp_path, capsys):
    assert main(["run", write(tmp_path, QUIET)]) == EXIT_SAFE
    assert main(["run", write(tmp_path, SHORT_UNSAFE, "bad")]) == EXIT_UNSAFE
    assert main(["run", write(tmp_path, "[run]\nspeed = 3\n", "typo")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["sweep", write(tmp_path, QUIET), "--rates", "0,10"]) == EXIT_CONFIG
    out = capsys.readouterr()
    assert "unsafe" in out.out and "configuration error" in out.err


def test_trace_layout_and_verdict_consistency(tmp_path):
    rep = run_scenario(parse_scenario(SHORT_UNSAFE, "reg"), tmp_path)
    header = (tmp_path / "reg.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == TRACE_COLUMNS
    tr = read_trace(tmp_path / "reg.csv")
    assert float(np.min(tr["h"])) == rep.min_h
    assert rep.verdict == "unsafe" and rep.min_h < 0
    summary = json.loads((tmp_path / "reg.json").read_text())
    assert summary["min_h"] == rep.min_h and summary["verdict"] == "unsafe"
    assert np.all(tr["solve_time_us"] == 0.0)


def test_runs_are_byte_identical(tmp_path):
    sc = parse_scenario(SHORT_UNSAFE, "reg")
    run_scenario(sc, tmp_path / "a")
    run_scenario(sc, tmp_path / "b")
    assert (tmp_path / "a" / "reg.csv").read_bytes() == (tmp_path / "b" / "reg.csv").read_bytes()


def test_single_rate_sweep_equals_run(tmp_path):
    sc = parse_scenario(SHORT_UNSAFE, "reg")
    rep = run_scenario(sc)
    swept = sweep_rates(sc, [50.0]).reports[0]
    a, b = rep.summary(), swept.summary()
    a.pop("wall_time_s"), b.pop("wall_time_s")
    assert a == b
    assert np.array_equal(rep.result.states, swept.result.states)


def test_empty_sweep(tmp_path, capsys):
    assert sweep_rates(parse_scenario(QUIET), []).reports == []
    assert main(["sweep", write(tmp_path, QUIET), "--rates", ""]) == EXIT_SAFE
    assert "minimum safe rate: none" in capsys.readouterr().out


def test_threaded_sweep_matches_serial():
    sc = parse_scenario(SHORT_UNSAFE, "reg")
    serial = sweep_rates(sc, [20.0, 50.0, 100.0])
    threaded = sweep_rates(sc, [20.0, 50.0, 100.0], workers=3)
    for a, b in zip(serial.reports, threaded.reports):
        assert a.rate == b.rate and np.array_equal(a.result.h, b.result.h)


def test_sweep_summary_flags_non_monotone():
    class Fake:
        def __init__(self, rate, verdict):
            self.rate, self.verdict = rate, verdict

    s = summarize_sweep([Fake(100, "safe"), Fake(10, "unsafe"), Fake(50, "safe"), Fake(200, "unsafe")])
    assert s.min_safe_rate == 50 and s.non_monotone == [200]


def test_expectation_mismatch_is_reported():
    rep = run_scenario(parse_scenario(QUIET + "expect = unsafe\n"))
    assert rep.verdict == "safe"
    assert any("reference behaviour" in n for n in rep.notes)


def test_audit_command(tmp_path, capsys):
    text = "[plant]\npreset = fast\n[controller]\nkind = rti+tube_cbf\nrate = 100\n[safety]\naudit_samples = 100\n"
    assert main(["audit", write(tmp_path, text)]) == EXIT_SAFE
    info = json.loads(capsys.readouterr().out)
    assert info["U_tight"] == pytest.approx([3.6]) and info["G"] == pytest.approx([1.8])
