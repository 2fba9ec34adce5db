import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corrbound import backend as be
from corrbound import dynamics as dyn
from corrbound import expr as ex
from corrbound.gibbs import sample_gibbs
from corrbound.program import compile_expression, pack

needs_compiled = pytest.mark.skipif("compiled" not in be.available(), reason="compiled kernels not built")

EXPRS = ["q1^2 + p2", "sin(q1)*exp(-p1^2)", "sqrt(1 + q2^2)/(2 + cos(p2))", "-q1^3 + 2^q2 - log(3 + p1^2)",
         "pi*q1 - 7", "((q1 - p1)^2)^0.5", "q2^-2*(1 + q2^2)"]


@needs_compiled
class TestEquivalence:
    @given(st.sampled_from(EXPRS), st.integers(0, 1000))
    def test_eval(self, text, seed):
        X = np.random.default_rng(seed).uniform(-2, 2, (257, 4))
        prog = compile_expression(ex.parse(text, 2), 2)
        a = be.get_backend("compiled").eval_batch(prog, X)
        b = be.get_backend("python").eval_batch(prog, X)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("name", ["oscillator", "product", "pendulum"])
    def test_orbits(self, name):
        sys = dyn.builtin(name)
        X = np.random.default_rng(1).normal(size=(64, 2 * sys.r))
        obs = pack([compile_expression(sys.parse(a), sys.r) for a in ("p1", "cos(q1)", "H1^2")])
        r = [be.get_backend(n).leapfrog_orbits(sys.force_programs, obs, sys.conserved_programs, X, 0.01, 1500,
                                               checks=[10, 750]) for n in ("compiled", "python")]
        for field in ("a0", "integral_checks", "integral_full", "x_end", "h0"):
            np.testing.assert_allclose(getattr(r[0], field), getattr(r[1], field), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(r[0].drift_abs, r[1].drift_abs, rtol=1e-6, atol=1e-13)

    def test_record(self):
        sys = dyn.builtin("pendulum")
        a = be.get_backend("compiled").leapfrog_record(sys.force_programs, np.array([0.3, 1.0]), 0.01, 500)
        b = be.get_backend("python").leapfrog_record(sys.force_programs, np.array([0.3, 1.0]), 0.01, 500)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("name", ["oscillator", "pendulum"])
    def test_metropolis(self, name):
        sys = dyn.builtin(name)
        a = sample_gibbs(sys, 1.0, 2000, burn_in=500, proposal_scale=1.3, seed=4, backend=be.get_backend("compiled"))
        b = sample_gibbs(sys, 1.0, 2000, burn_in=500, proposal_scale=1.3, seed=4, backend=be.get_backend("python"))
        np.testing.assert_allclose(a.samples, b.samples, rtol=1e-12, atol=1e-14)
        assert a.acceptance_rate == b.acceptance_rate


def test_kernel_error_names_sample(any_backend):
    prog = compile_expression(ex.parse("1/q1", 1), 1)
    X = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
    with pytest.raises(be.KernelError, match="sample 2") as info:
        any_backend.eval_batch(prog, X)
    assert info.value.index == 2


def test_non_finite_trajectory_reported(any_backend):
    sys = dyn.make_system(1, "p1^2/2 - q1^4")
    X = np.array([[0.0, 0.0], [3.0, 0.0]])  # an equilibrium and an escaping start
    obs = pack([compile_expression(ex.parse("q1", 1), 1)])
    with pytest.raises(be.KernelError, match="trajectory 1") as info:
        any_backend.leapfrog_orbits(sys.force_programs, obs, None, X, 0.1, 10_000)
    assert info.value.step > 0


def test_set_default():
    try:
        be.set_default("python")
        assert be.get_backend().name == "python"
        with pytest.raises(ValueError):
            be.set_default("gpu")
    finally:
        be.set_default(None)


def test_unknown_backend():
    with pytest.raises(ValueError, match="available"):
        be.get_backend("gpu")


def test_fallback_selected_by_environment():
    code = "from corrbound.backend import get_backend; print(get_backend().name)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"CORRBOUND_BACKEND": "python", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"


def test_threads_do_not_change_results(any_backend):
    sys = dyn.builtin("product")
    X = np.random.default_rng(2).normal(size=(101, 4))
    obs = pack([compile_expression(sys.parse("q1^2*q2^2"), 2)])
    try:
        be.set_threads(1)
        one = any_backend.leapfrog_orbits(sys.force_programs, obs, None, X, 0.05, 200).integral_full
        be.set_threads(3)
        three = any_backend.leapfrog_orbits(sys.force_programs, obs, None, X, 0.05, 200).integral_full
    finally:
        be.set_threads(1)
    assert np.array_equal(one, three)
