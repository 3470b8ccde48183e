import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from vicsek2p import cli
from vicsek2p.errors import ConfigError


def run_cli(*args, env_extra=None):
    env = os.environ.copy()
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "vicsek2p", *args],
                          capture_output=True, text=True, env=env)


# --- configuration parsing ----------------------------------------------------

def test_minimal_config_fills_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{}")
    cfg = cli.parse_config(str(path))
    assert cfg.numerics["nodes"] == 1024
    assert cfg.numerics["cfl"] == 0.5
    assert cfg.model["R"] is None
    assert cfg.run == "validate"


def test_negative_parameter_rejected_by_name(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"d0": -0.5}}')
    with pytest.raises(ConfigError, match=r"model\.d0"):
        cli.parse_config(str(path))


def test_unknown_key_rejected_by_name(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"dd0": 0.5}}')
    with pytest.raises(ConfigError, match=r"model\.dd0"):
        cli.parse_config(str(path))


def test_json_syntax_error_reports_position(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {\n  "d0": 0.5,,\n}}')
    with pytest.raises(ConfigError, match="line 2"):
        cli.parse_config(str(path))


def test_unknown_run_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"run": "frobnicate"}')
    with pytest.raises(ConfigError, match="run"):
        cli.parse_config(str(path))


def test_bool_is_not_a_number(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"alpha": true}}')
    with pytest.raises(ConfigError, match=r"model\.alpha"):
        cli.parse_config(str(path))


# --- validation report ----------------------------------------------------------

def test_report_roundtrip():
    rep = cli.ValidationReport()
    rep.add("alpha_check", 1e-10, 1e-8)
    rep.add("beta_check", 2.0, 1.0)
    data = json.loads(json.dumps(rep.to_dict()))
    back = cli.ValidationReport.from_dict(data)
    assert back == rep
    assert back.overall is False


def test_run_validate_default_passes():
    report = cli.run_validate(cli.parse_config(None))
    failed = [c.name for c in report.checks if not c.passed]
    assert report.overall, f"failed checks: {failed}"


@pytest.mark.parametrize("fault,expected", [
    ("drop-hprime-term", {"linearization_fd_order", "collisional_invariant_cancellation"}),
    ("skew-i2", {"gci_elliptic_residual"}),
    ("mass-imbalance", {"solver_mass_conservation"}),
])
def test_fault_modes_are_detected(fault, expected):
    report = cli.run_validate(cli.parse_config(None), fault=fault)
    failed = {c.name for c in report.checks if not c.passed}
    assert expected <= failed
    assert not report.overall


def test_unknown_fault_mode_rejected():
    with pytest.raises(ConfigError):
        cli.run_validate(cli.parse_config(None), fault="nonsense")


# --- subcommands end to end -----------------------------------------------------

def test_coeffs_emits_versioned_csv():
    res = run_cli("coeffs", "--lambda-min", "0.5", "--lambda-max", "1.0",
                  "--lambda-steps", "2", "--nodes", "256")
    assert res.returncode == 0
    lines = res.stdout.strip().splitlines()
    assert lines[0].startswith("# vicsek2p csv v1")
    assert lines[1] == "lambda,C,c,gamma1,beta,bracket_sin2h,bracket_sin2cosh"
    assert len(lines) == 4


def test_equilibria_and_closure_headers(tmp_path):
    eq = tmp_path / "eq.csv"
    res = run_cli("equilibria", "--phi-steps", "5", "--out", str(eq))
    assert res.returncode == 0
    assert eq.read_text().splitlines()[1] == \
        "phi,s0_perp,s1_perp,abs_s0_perp,sign,term_gci,term_close"
    cl = tmp_path / "cl.csv"
    res = run_cli("closure", "--rho-steps", "3", "--out", str(cl))
    assert res.returncode == 0
    assert cl.read_text().splitlines()[1] == "rho,rho1,rho0,A0,A1,M,N,P"


def test_macro_solvers_emit_rows(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text('{"numerics": {"nx": 16, "t_end": 0.05}}')
    out2 = tmp_path / "m2p.csv"
    res = run_cli("macro2p", "--config", str(cfgfile), "--out", str(out2))
    assert res.returncode == 0, res.stderr
    header = out2.read_text().splitlines()[1]
    assert header == "t,x,rho0,theta0,rho1,theta1"
    outc = tmp_path / "mc.csv"
    res = run_cli("macroclosed", "--config", str(cfgfile), "--out", str(outc))
    assert res.returncode == 0, res.stderr
    assert outc.read_text().splitlines()[1] == "t,x,rho,theta"


def test_validate_exit_codes(tmp_path):
    out = tmp_path / "report.json"
    res = run_cli("validate", "--out", str(out))
    assert res.returncode == 0
    payload = json.loads(out.read_text())
    assert payload["overall"] is True
    assert all("name" in c for c in payload["checks"])

    res = run_cli("validate", "--fault", "skew-i2")
    assert res.returncode == 2  # rejected without the enabling env var

    res = run_cli("validate", "--fault", "skew-i2",
                  env_extra={"VICSEK2P_ENABLE_FAULTS": "1"})
    assert res.returncode == 1


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"d0": -1}}')
    res = run_cli("validate", "--config", str(path))
    assert res.returncode == 2
    assert "model.d0" in res.stderr


def test_xscale_refuses_small_populations(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"n": 50}}')
    res = run_cli("xscale", "--config", str(path))
    assert res.returncode == 2
    assert "1000" in res.stderr


def test_micro_ndjson_roundtrips_into_init(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({
        "model": {"n": 40, "tau0": 0.5, "tau1": 0.5},
        "numerics": {"dt": 0.02, "t_end": 0.1, "seed": 9},
        "io": {"format": "ndjson"},
    }))
    res = run_cli("micro", "--config", str(cfgfile), "--out", str(tmp_path),
                  "--snapshot-every", "1000")
    assert res.returncode == 0, res.stderr
    path = tmp_path / "micro.ndjson"
    first = path.read_text().splitlines()[0]
    assert json.loads(first)["format"] == "vicsek2p-ndjson"

    # keep only the final frame so the record count matches n
    records = [json.loads(l) for l in path.read_text().splitlines()[1:]]
    t_last = max(r["t"] for r in records)
    final = [r for r in records if r["t"] == t_last]
    trimmed = tmp_path / "final.ndjson"
    with open(trimmed, "w") as fh:
        for r in final:
            fh.write(json.dumps(r) + "\n")
    from vicsek2p import particle
    p = particle.MicroParams(n=40, speed=1.0, radius=None, phase0=(1.0, 0.5),
                             phase1=(1.0, 0.25), tau0=0.5, tau1=0.5, alpha=1.0,
                             box=1.0, dt=0.02, seed=9)
    ens = particle.init_ensemble(p, init={"mode": "file", "path": str(trimmed)})
    assert ens.n == 40


def test_xscale_two_state_equilibrium(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({
        "model": {"n": 2000, "alpha": 0.0, "tau0": 1.0, "tau1": 2.0},
        "numerics": {"dt": 0.02, "t_end": 25.0, "seed": 3},
    }))
    out = tmp_path / "x.csv"
    res = run_cli("xscale", "--config", str(cfgfile), "--out", str(out))
    assert res.returncode == 0, res.stderr
    rows = {line.split(",")[0]: line.split(",")[1:]
            for line in out.read_text().splitlines()[2:]}
    micro, macro, gap = (float(v) for v in rows["moving_fraction"])
    assert macro == pytest.approx(1 / 3, abs=1e-6)
    assert abs(gap) < 3 * math.sqrt((1 / 3) * (2 / 3) / 2000)


def test_heading_ks_discriminates(rng):
    from vicsek2p.vonmises import sample_von_mises

    th = sample_von_mises(0.5, 1.0, rng, size=30_000)
    assert cli.heading_ks(th, 0.5, 1.0) < 0.02
    assert cli.heading_ks(th, 2.5, 1.0) > 0.1


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("VICSEK2P_THREADS", "2")
    assert cli._worker_count() == 2
    monkeypatch.setenv("VICSEK2P_THREADS", "junk")
    assert cli._worker_count() == 1
    report = cli.run_validate(cli.parse_config(None))
    assert report.overall
