import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corrbound import dynamics as dyn
from corrbound import expr as ex

HO = dyn.builtin("oscillator")
PEND = dyn.builtin("pendulum")
PROD = dyn.builtin("product")


def reverse(sys, s, dt, n, backend=None):
    x = dyn.integrate(sys, s, n * dt, dt, backend=backend).states[-1]
    r = sys.r
    x[r:] *= -1
    back = dyn.integrate(sys, dyn.PhaseState.from_array(x), n * dt, dt, backend=backend).states[-1]
    back[r:] *= -1
    return back


class TestPhaseState:
    def test_rejects_unequal_lengths(self):
        with pytest.raises(ValueError):
            dyn.PhaseState((1.0, 2.0), (0.0,))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            dyn.PhaseState((math.inf,), (0.0,))

    def test_array_round_trip(self):
        s = dyn.PhaseState((1.0, 2.0), (3.0, 4.0))
        assert dyn.PhaseState.from_array(s.as_array()) == s


class TestSystemSpec:
    def test_builtins(self):
        assert (HO.r, HO.k) == (1, 1)
        assert (PROD.r, PROD.k) == (2, 2)
        assert PEND.periodic == (True,)
        with pytest.raises(ValueError, match="unknown built-in"):
            dyn.builtin("kepler")

    def test_first_conserved_is_hamiltonian(self):
        for sys in (HO, PROD, PEND):
            assert sys.conserved[0] == sys.hamiltonian

    def test_non_separable_rejected(self):
        with pytest.raises(dyn.NonSeparableError, match="separable"):
            dyn.make_system(1, "q1^2*p1^2/2 + q1^2/2")

    def test_conserved_may_use_macros(self):
        sys = dyn.make_system(2, "p1^2/2 + q1^2/2 + p2^2/2 + q2^2/2", ["p2^2/2 + q2^2/2", "H1 - H2"])
        x = np.array([[0.3, -0.2, 0.5, 1.1]])
        vals = sys.conserved_values(x)[0]
        assert vals[2] == pytest.approx(vals[0] - vals[1], abs=1e-15)


class TestStep:
    def test_full_period_returns_to_start(self):
        # the step count must cover exactly one period, so dt is set to 2π/n
        n = round(2 * math.pi / 1e-3)
        dt = 2 * math.pi / n
        traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), n * dt, dt)
        assert len(traj) == n + 1
        assert np.abs(traj.states[-1] - [1.0, 0.0]).max() < 1e-5

    def test_single_step_is_order_dt(self):
        s = dyn.PhaseState((0.7,), (-0.4,))
        for dt in (1e-2, 1e-3, 1e-4):
            moved = np.abs(dyn.step_verlet(PEND, s, dt).as_array() - s.as_array()).max()
            assert moved < 2 * dt
            assert moved > 0.1 * dt

    def test_step_matches_integrate(self):
        s = dyn.PhaseState((0.2, -1.0), (0.5, 0.3))
        one = dyn.step_verlet(PROD, s, 0.01)
        assert np.array_equal(one.as_array(), dyn.integrate(PROD, s, 0.01, 0.01).states[-1])

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            dyn.step_verlet(HO, dyn.PhaseState((1.0,), (0.0,)), 0.0)

    @pytest.mark.parametrize("sys, s", [
        (HO, dyn.PhaseState((1.0,), (0.3,))),
        (PEND, dyn.PhaseState((0.5,), (0.0,))),
        (PEND, dyn.PhaseState((0.0,), (2.5,))),
        (PROD, dyn.PhaseState((0.4, -0.9), (1.2, 0.1))),
    ])
    def test_reversible(self, sys, s, any_backend):
        back = reverse(sys, s, 1e-2, 1000, any_backend)
        assert np.abs(back - s.as_array()).max() < 1e-10

    @given(st.floats(-2.5, 2.5), st.floats(-1.5, 1.5))
    def test_reversible_pendulum_property(self, q, p):
        s = dyn.PhaseState((q,), (p,))
        h = p * p / 2 - math.cos(q)
        if abs(h - 1.0) < 0.05:  # stay clear of the separatrix
            return
        assert np.abs(reverse(PEND, s, 1e-2, 1000) - s.as_array()).max() < 1e-10


class TestIntegrate:
    def test_state_count(self):
        traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 1.0, 0.3)
        assert len(traj) == 4
        assert traj.times[-1] == pytest.approx(0.9)

    def test_single_step(self):
        assert len(dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 1e-3, 1e-3)) == 2

    def test_oscillator_energy_drift(self):
        traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 100.0, 1e-3)
        assert traj.drift[0] < 1e-6
        assert not traj.warnings

    def test_pendulum_energy_drift(self):
        traj = dyn.integrate(PEND, dyn.PhaseState((0.5,), (0.0,)), 50.0, 1e-3)
        assert traj.drift[0] < 1e-5

    def test_product_both_energies(self):
        traj = dyn.integrate(PROD, dyn.PhaseState((1.0, 0.5), (0.0, -0.3)), 50.0, 1e-3)
        assert traj.drift.shape == (2,)
        assert traj.drift.max() < 1e-6

    def test_drift_over_tolerance_warns_but_returns(self):
        traj = dyn.integrate(PEND, dyn.PhaseState((0.5,), (1.0,)), 20.0, 0.2, drift_tol=1e-8)
        assert len(traj) == 101
        assert traj.warnings and "H1" in traj.warnings[0]

    def test_step_cap(self):
        with pytest.raises(dyn.StepCapError):
            dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 10.0, 1e-3, max_steps=1000)

    @pytest.mark.parametrize("T, dt", [(0.0, 1e-3), (1.0, -1.0), (1e-4, 1e-3)])
    def test_bad_horizon(self, T, dt):
        with pytest.raises(ValueError):
            dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), T, dt)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            dyn.integrate(HO, dyn.PhaseState((1.0, 0.0), (0.0, 0.0)), 1.0, 0.1)

    def test_second_order(self):
        # per-period energy error shrinks by about 4 when dt halves
        errs = []
        for dt in (1e-2, 5e-3, 2.5e-3):
            n = round(2 * math.pi / dt)
            traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), n * dt, dt)
            errs.append(traj.drift[0])
        for a, b in zip(errs, errs[1:]):
            assert 3.0 <= a / b <= 5.0


class TestConservedDrift:
    def test_constant_pseudo_quantity(self):
        traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 10.0, 1e-3)
        d = dyn.conserved_drift(traj, HO, extra=[ex.parse("1", 1)])
        assert d[1] == 0.0

    def test_non_conserved_flagged(self):
        traj = dyn.integrate(HO, dyn.PhaseState((1.0,), (0.0,)), 10.0, 1e-3)
        d = dyn.conserved_drift(traj, HO, extra=[ex.parse("q1", 1)])
        assert d[0] < 1e-6
        assert 1.5 < d[1] <= 2.0

    def test_relative_scale(self):
        assert dyn.relative_drift(np.array([10.0, 11.0, 9.5])) == pytest.approx(0.1)
        assert dyn.relative_drift(np.array([0.1, 0.3])) == pytest.approx(0.2)
