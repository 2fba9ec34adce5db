import pytest

from corrbound.config import ConfigError, load_config, parse_config

MINIMAL = """
[system]
name = oscillator
[gibbs]
beta = 1.0
n = 1000
"""


def problems(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return dict(info.value.problems)


def test_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.system.name == "oscillator"
    assert cfg.gibbs.n == 1000 and cfg.gibbs.seed == 0
    assert cfg.observable == "q1^2"
    assert cfg.bounds.degrees == [0, 1, 2, 3]
    assert cfg.bounds.standardize is True


def test_full_file():
    cfg = parse_config("""
[system]
name = duffing            ; inline system
r = 1
hamiltonian = p1^2/2 + q1^2/2 + q1^4/4
[gibbs]
beta = 2
n = 500
seed = 7
proposal_scale = auto
[observable]
A = q1^2 * H1
[dynamics]
T = 100
dt = 0.01
n_traj = auto
[bounds]
degrees = 0-4, 6
d_probe = 7
jitter = 1e-10
standardize = no
resamples = 50
partition_gram = cell
[labeler]
low = H1 < 1
high = otherwise
[output]
dir = results
prefix = duff
""")
    assert cfg.system.hamiltonian.startswith("p1^2/2")
    assert cfg.gibbs.proposal_scale is None and cfg.gibbs.seed == 7
    assert cfg.observable == "q1^2 * H1"
    assert cfg.dynamics.n_traj is None
    assert cfg.bounds.degrees == [0, 1, 2, 3, 4, 6]
    assert cfg.bounds.jitter == 1e-10 and cfg.bounds.standardize is False
    assert cfg.labeler == [("low", "H1 < 1"), ("high", "otherwise")]
    assert str(cfg.output_path("report.json")) == "results/duff.report.json"
    sys = cfg.build_system()
    assert sys.name == "duffing" and sys.k == 1
    assert cfg.build_labeler(sys).names == ["low", "high"]


def test_beta_zero_names_field():
    assert "gibbs.beta" in problems(MINIMAL.replace("beta = 1.0", "beta = 0"))


def test_several_problems_reported_together():
    p = problems(MINIMAL + "[dynamics]\nT = -1\ndt = abc\n")
    assert {"dynamics.T", "dynamics.dt"} <= set(p)


def test_bad_expression():
    p = problems(MINIMAL + "[observable]\nA = q1 +* 2\n")
    assert "observable.A" in p


def test_variable_out_of_range():
    assert "observable.A" in problems(MINIMAL + "[observable]\nA = q2\n")


def test_degree_cap():
    p = problems(MINIMAL + "[bounds]\ndegrees = 0-12\n")
    assert "exceeds the cap" in p["bounds.degrees"]


def test_basis_cap():
    p = problems(MINIMAL.replace("name = oscillator", "name = product") + "[bounds]\ndegrees = 8\nbasis_cap = 20\n")
    assert "basis size" in p["bounds.degrees"]


def test_unknown_section_and_system():
    p = problems(MINIMAL.replace("oscillator", "kepler") + "[extra]\nx = 1\n")
    assert "extra" in p and "system.name" in p


def test_misspelled_key_rejected():
    p = problems(MINIMAL + "[dynamics]\ndrift_tl = 1e-3\n")
    assert p == {"dynamics.drift_tl": "unknown key"}


@pytest.mark.parametrize("path", ["configs/pendulum.ini", "configs/oscillator.ini", "configs/custom.ini"])
def test_shipped_examples_load(path):
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / path)
    assert cfg.bounds.degrees


def test_inline_needs_r():
    assert "system.r" in problems("[system]\nhamiltonian = p1^2/2\n")


def test_non_separable():
    p = problems("[system]\nr = 1\nhamiltonian = q1^2*p1^2\n")
    assert "system" in p and "separable" in p["system"]


def test_bad_labeler():
    assert "labeler" in problems(MINIMAL + "[labeler]\nx = H1 ~ 1\n")


def test_step_cap():
    p = problems(MINIMAL + "[dynamics]\nT = 1000\ndt = 1e-3\nmax_steps = 100\n")
    assert "max_steps" in p["dynamics.dt"]


def test_syntax_error():
    assert "<file>" in problems("[system\nname = x\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


def test_to_dict_round_trips_through_json():
    import json
    d = parse_config(MINIMAL).to_dict()
    assert json.loads(json.dumps(d))["gibbs"]["n"] == 1000
