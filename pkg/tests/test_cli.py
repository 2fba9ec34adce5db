import json

import pytest

from corrbound import cli

HO_CFG = """
[system]
name = oscillator
[gibbs]
beta = 1.0
n = 4000
burn_in = 2000
seed = 5
[observable]
A = q1^2
[dynamics]
T = 62.83185307179586
dt = 0.05
n_traj = 1000
[bounds]
degrees = 1, 2, 3
resamples = 30
[output]
prefix = ho
"""

PEND_CFG = """
[system]
name = pendulum
[gibbs]
n = 6000
seed = 3
[observable]
A = p1
[dynamics]
T = 100
dt = 0.05
n_traj = 1500
[bounds]
degrees = 0-4
resamples = 30
[labeler]
rotators+ = p1 > 0 and H1 > 1
rotators- = p1 < 0 and H1 > 1
librators = H1 <= 1
"""


@pytest.fixture
def cfg(tmp_path):
    def write(text, name="run.ini"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return write


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_sample_writes_ensemble(cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("sample", "--config", cfg(HO_CFG), "--out", out) == 0
    path = out / "ho.ensemble.csv"
    text = path.read_text()
    assert "# beta=1.0" in text and "# seed=5" in text
    assert len([ln for ln in text.splitlines() if ln and ln[0] in "-0123456789"]) == 4000
    assert "ho.ensemble.csv" in capsys.readouterr().out


def test_sample_is_deterministic(cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("sample", "--config", cfg(HO_CFG), "--ensemble", a)
    run("sample", "--config", cfg(HO_CFG), "--ensemble", b)
    assert a.read_bytes() == b.read_bytes()
    run("sample", "--config", cfg(HO_CFG), "--ensemble", b, "--seed", 6)
    assert a.read_bytes() != b.read_bytes()


def test_invalid_beta(cfg, capsys):
    assert run("sample", "--config", cfg(HO_CFG.replace("beta = 1.0", "beta = 0"))) == 1
    assert "gibbs.beta" in capsys.readouterr().err


def test_degree_over_cap_fails_before_work(cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("bound", "--config", cfg(HO_CFG.replace("degrees = 1, 2, 3", "degrees = 1, 11")), "--out", out) == 1
    assert "exceeds the cap" in capsys.readouterr().err
    assert not out.exists()


def test_ensemble_mismatch(cfg, tmp_path, capsys):
    ens = tmp_path / "e.csv"
    run("sample", "--config", cfg(HO_CFG), "--ensemble", ens)
    other = cfg(HO_CFG.replace("beta = 1.0", "beta = 2.0"), "b2.ini")
    assert run("bound", "--config", other, "--ensemble", ens, "--out", tmp_path) == 1
    assert "beta" in capsys.readouterr().err
    pend = cfg(PEND_CFG, "p.ini")
    assert run("correlate", "--config", pend, "--ensemble", ens, "--out", tmp_path) == 1


def test_correlate(cfg, tmp_path, capsys):
    assert run("correlate", "--config", cfg(HO_CFG), "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "ho.estimates.json").read_text())
    assert {e["method"] for e in doc["estimates"]} == {"norm_of_orbital_average", "direct_time_integral"}
    assert (tmp_path / "ho.estimates.csv").read_text().startswith("observable,method,T,dt,n,value,stderr")


def test_bound_oscillator_saturates(cfg, tmp_path):
    ens = tmp_path / "e.csv"
    run("sample", "--config", cfg(HO_CFG), "--ensemble", ens)
    assert run("bound", "--config", cfg(HO_CFG), "--ensemble", ens, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "ho.report.json").read_text())
    assert rep["schema_version"] == "1.0"
    C = rep["estimates"][0]["value"]
    b1, b2, b3 = (b["value"] for b in rep["bounds"])
    assert abs(b1 - 2.0) < 0.3 and abs(C - 2.0) < 0.3
    assert b2 == pytest.approx(b1, rel=0.03) and b3 == pytest.approx(b1, rel=0.03)
    assert rep["saturation"]["verdict"] == "consistent with saturation"
    assert (tmp_path / "ho.report.csv").exists() and (tmp_path / "ho.gram.csv").exists()


def test_bound_pendulum_partition(cfg, tmp_path):
    assert run("bound", "--config", cfg(PEND_CFG), "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "run.report.json").read_text())
    plain = rep["bounds"][-1]
    part = rep["partitioned"]["cell"][-1]
    assert plain["value"] < 0.02
    assert part["value"] > 0.2
    assert rep["cells"]["names"] == ["rotators+", "rotators-", "librators"]


def test_bound_is_deterministic(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    c = cfg(HO_CFG)
    out = tmp_path / "o"
    run("bound", "--config", c, "--out", out)
    first = (out / "ho.report.json").read_bytes()
    run("bound", "--config", c, "--out", out)
    assert (out / "ho.report.json").read_bytes() == first


def test_report_subcommand(cfg, tmp_path, capsys):
    run("bound", "--config", cfg(HO_CFG), "--out", tmp_path)
    capsys.readouterr()
    assert run("report", tmp_path / "ho.report.json", "--csv", tmp_path / "flat.csv") == 0
    out = capsys.readouterr().out
    assert "bound_1" in out
    assert (tmp_path / "flat.csv").read_text().startswith("observable,kind,name,d,value,stderr,cond,jitter")


def test_report_rejects_bad_file(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"schema_version": "0.1"}))
    assert run("report", p) == 1
    assert run("report", tmp_path / "missing.json") == 1


def test_warnings_reach_report(cfg, tmp_path):
    text = HO_CFG.replace("dt = 0.05", "dt = 0.2")
    run("bound", "--config", cfg(text), "--out", tmp_path)
    rep = json.loads((tmp_path / "ho.report.json").read_text())
    assert any("drift" in w for w in rep["warnings"])


def test_verify_unknown_suite(capsys):
    assert run("verify", "kepler") == 1
    err = capsys.readouterr().err
    assert "oscillator" in err and "all" in err


def test_global_flags_either_side(cfg, tmp_path):
    c = cfg(HO_CFG)
    assert run("--threads", 2, "--backend", "python", "sample", "--config", c, "--ensemble", tmp_path / "a.csv") == 0
    assert run("sample", "--config", c, "--ensemble", tmp_path / "b.csv", "--threads", 1) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert run("--threads", 0, "sample", "--config", c) == 1


def test_missing_config(tmp_path):
    assert run("sample", "--config", tmp_path / "none.ini") == 1


def test_runtime_failure_exit_code(cfg, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("overflow")
    monkeypatch.setattr(cli, "orbit_batch", boom)
    assert run("correlate", "--config", cfg(HO_CFG), "--out", tmp_path) == 2
