import math

import numpy as np
import pytest
from scipy.integrate import quad

from corrbound import bounds as bd
from corrbound import correlation as co
from corrbound import dynamics as dyn
from corrbound import gibbs as gb
from corrbound import regular as rg

HO = dyn.builtin("oscillator")
PEND = dyn.builtin("pendulum")
PROD = dyn.builtin("product")


@pytest.fixture(scope="module")
def ho_table():
    return rg.level_set_table(HO, "q1^2", 1.0)


class TestLevelSetAverage:
    @pytest.mark.parametrize("E", [0.01, 0.5, 3.0, 20.0])
    def test_oscillator_q_squared(self, E):
        r = rg.level_set_average(HO, "q1^2", E)
        assert r.value == pytest.approx(E, rel=1e-6)
        assert r.period == pytest.approx(2 * math.pi, abs=1e-6)

    def test_oscillator_odd(self):
        assert abs(rg.level_set_average(HO, "q1", 1.7).value) < 1e-6

    def test_start_hint_projected(self):
        r = rg.level_set_average(HO, "p1^2", 2.0, start_hint=dyn.PhaseState((0.3,), (1.0,)))
        assert r.value == pytest.approx(2.0, rel=1e-6)

    def test_pendulum_rotation(self):
        E = 1.125
        start = dyn.PhaseState((0.0,), (math.sqrt(2 * (E + 1)),))
        r = rg.level_set_average(PEND, "p1", E, start_hint=start, dt=1e-4)
        T_ref = quad(lambda q: 1 / math.sqrt(2 * (E + math.cos(q))), 0, 2 * math.pi, epsabs=1e-13)[0]
        assert r.component == "rotating+"
        assert r.period == pytest.approx(T_ref, rel=1e-8)
        assert r.value == pytest.approx(2 * math.pi / T_ref, rel=1e-6)
        long_avg = co.orbital_average(PEND, "p1", start, 5000.0, 5e-3)
        assert abs(r.value - long_avg) < 1e-4

    def test_pendulum_libration_period(self):
        from scipy.special import ellipk
        E = 0.0  # amplitude π/2
        r = rg.level_set_average(PEND, "1", E)
        assert r.component == "librating"
        assert r.period == pytest.approx(4 * ellipk(0.5), rel=1e-7)

    def test_separatrix_fails(self):
        with pytest.raises(rg.RegularityError, match="separatrix"):
            rg.level_set_average(PEND, "p1", 1.0, start_hint=dyn.PhaseState((0.0,), (2.0,)))

    def test_step_cap(self):
        with pytest.raises(rg.PeriodNotFound):
            rg.level_set_average(HO, "q1", 1.0, max_steps=1000)

    def test_energy_mismatch(self):
        with pytest.raises(rg.RegularityError):
            rg.level_set_average(PEND, "p1", -2.0)

    def test_needs_one_degree_of_freedom(self):
        with pytest.raises(rg.RegularityError):
            rg.level_set_average(PROD, "q1", 1.0)


class TestNorm:
    def test_oscillator_q_squared(self, ho_table):
        assert ho_table.norm_squared() == pytest.approx(2.0, rel=1e-6)
        assert np.ptp(ho_table.periods) < 1e-6

    def test_oscillator_q(self):
        assert abs(rg.norm_AH_squared(HO, "q1", 1.0, n_nodes=16)) < 1e-10

    def test_oscillator_energy_squared_beta_two(self):
        assert rg.norm_AH_squared(HO, "H1^2", 2.0) == pytest.approx(1.5, rel=1e-6)

    def test_projection_property(self, ho_table):
        ens = gb.sample_gibbs(HO, 1.0, 50_000, seed=41)
        od = bd.build_overlaps(ens, HO, "q1^2", bd.enumerate_basis(1, 3))
        for j in range(4):
            quad_val = ho_table.inner(lambda a, j=j: a[:, 0] ** j)
            assert quad_val == pytest.approx(math.factorial(j + 1), rel=1e-6)
            assert abs(od.overlaps[j] - quad_val) < 3 * od.overlaps_stderr[j]

    def test_pendulum_rejected(self):
        with pytest.raises(rg.RegularityError, match="components"):
            rg.norm_AH_squared(PEND, "p1", 1.0)

    def test_double_well_rejected(self):
        sys = dyn.make_system(1, "p1^2/2 + q1^4 - 2*q1^2")
        with pytest.raises(rg.RegularityError, match="wells"):
            rg.norm_AH_squared(sys, "q1", 1.0)

    def test_product_q_squared_product(self):
        # A^H = E1 * E2 / 2 on the torus, so ||A^H||^2 = <E1^2><E2^2>/4 = 1
        v = rg.norm_AH_squared(PROD, "q1^2*q2^2", 1.0, n_nodes=12, T_torus=1000.0)
        assert v == pytest.approx(1.0, rel=1e-2)

    def test_csv(self, ho_table, tmp_path):
        lines = ho_table.to_csv(tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "alpha1,A_H,volume,weight"
        assert len(lines) == 1 + rg.DEFAULT_NODES
