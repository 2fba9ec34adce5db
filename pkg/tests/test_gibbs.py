import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from corrbound import dynamics as dyn
from corrbound import gibbs as gb
from corrbound import stats

HO = dyn.builtin("oscillator")
PEND = dyn.builtin("pendulum")


@pytest.fixture(scope="module")
def ho():
    return gb.sample_gibbs(HO, 1.0, 100_000, seed=3)


@pytest.fixture(scope="module")
def pend():
    return gb.sample_gibbs(PEND, 1.0, 50_000, seed=4)


def within(mean_se, target, k=3.0):
    mean, se = mean_se
    return abs(mean - target) <= k * se


class TestSampler:
    def test_acceptance_in_range(self, ho, pend):
        for ens in (ho, pend):
            assert 0.1 <= ens.acceptance_rate <= 0.7
            assert not ens.warnings

    def test_mean_energy(self, ho):
        assert within(gb.expectation(ho, "H1", HO), 1.0)

    def test_second_moment_energy(self, ho):
        assert within(gb.expectation(ho, "H1^2", HO), 2.0)

    def test_odd_moments_vanish(self, ho, pend):
        assert within(gb.expectation(ho, "q1", HO), 0.0)
        assert within(gb.expectation(pend, "p1", PEND), 0.0)

    def test_gaussian_marginal_at_beta_two(self):
        # q1 is N(0, 1/β) under exp(-β(q²+p²)/2)
        ens = gb.sample_gibbs(HO, 2.0, 100_000, seed=5)
        assert within(gb.expectation(ens, "q1^2", HO), 0.5)
        assert within(gb.expectation(ens, "H1", HO), 0.5)

    def test_pendulum_angle_wraps(self, pend):
        q = pend.q[:, 0]
        assert q.min() >= -math.pi and q.max() < math.pi
        # von Mises marginal: <cos q> = I1(β)/I0(β)
        from scipy.special import i0, i1
        assert within(gb.expectation(pend, "cos(q1)", PEND), i1(1.0) / i0(1.0))

    def test_energy_distribution_ks(self, ho):
        # thin to roughly independent draws before the one-sample KS test
        h = HO.evaluate("H1", ho.samples)
        step = max(1, math.ceil(ho.n / ho.ess["H"]))
        sub = h[::step]
        D = sps.kstest(sub, sps.expon(scale=1.0).cdf).statistic
        assert D < 1.63 / math.sqrt(sub.size)

    def test_deterministic(self):
        a = gb.sample_gibbs(PEND, 0.7, 2000, burn_in=500, thin=3, proposal_scale=1.1, seed=9)
        b = gb.sample_gibbs(PEND, 0.7, 2000, burn_in=500, thin=3, proposal_scale=1.1, seed=9)
        c = gb.sample_gibbs(PEND, 0.7, 2000, burn_in=500, thin=3, proposal_scale=1.1, seed=10)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_tuning_is_deterministic(self):
        a = gb.sample_gibbs(HO, 1.0, 500, burn_in=100, seed=2)
        b = gb.sample_gibbs(HO, 1.0, 500, burn_in=100, seed=2)
        assert a.proposal_scale == b.proposal_scale

    def test_bad_proposal_warns(self):
        ens = gb.sample_gibbs(HO, 1.0, 2000, burn_in=100, proposal_scale=40.0, seed=1)
        assert ens.acceptance_rate < 0.1
        assert any("decrease proposal_scale" in w for w in ens.warnings)

    def test_nonfinite_proposals_rejected_and_counted(self):
        sys = dyn.make_system(1, "p1^2/2 + sqrt(1 - q1^2)*0 + q1^2/2", name="walled")
        ens = gb.sample_gibbs(sys, 1.0, 2000, burn_in=200, proposal_scale=1.0, seed=0)
        assert np.abs(ens.q).max() <= 1.0
        assert ens.n_nonfinite > 0
        assert any("non-finite" in w for w in ens.warnings)

    @pytest.mark.parametrize("kw", [dict(beta=0.0), dict(n=0), dict(thin=0), dict(burn_in=-1),
                                    dict(proposal_scale=-1.0)])
    def test_rejects_bad_arguments(self, kw):
        args = dict(beta=1.0, n=10, burn_in=0, thin=1, proposal_scale=1.0, seed=0) | kw
        with pytest.raises(ValueError):
            gb.sample_gibbs(HO, **args)


class TestExpectation:
    def test_constant_one(self, pend):
        assert gb.expectation(pend, "1", PEND) == (1.0, 0.0)

    def test_callable_and_array(self, ho):
        m1 = gb.expectation(ho, lambda X: X[:, 0] ** 2)
        m2 = gb.expectation(ho, ho.samples[:, 0] ** 2)
        m3 = gb.expectation(ho, "q1^2", HO)
        assert m1 == m2
        assert m1[0] == pytest.approx(m3[0], rel=1e-14)

    def test_nonfinite_names_index(self, ho):
        vals = np.ones(ho.n)
        vals[17] = np.nan
        with pytest.raises(gb.SamplingError, match="index 17"):
            gb.expectation(ho, vals)

    @settings(max_examples=25)
    @given(st.sampled_from(["q1", "p1^2", "q1*p1", "cos(q1)", "H1"]), st.sampled_from(["1", "q1^3", "p1", "H1^2"]))
    def test_linearity(self, f, g):
        ens = gb.sample_gibbs(HO, 1.0, 1000, burn_in=0, proposal_scale=1.0, seed=0)
        ef = gb.expectation(ens, f, HO)[0]
        eg = gb.expectation(ens, g, HO)[0]
        efg = gb.expectation(ens, f"({f}) + ({g})", HO)[0]
        assert efg == pytest.approx(ef + eg, rel=1e-12, abs=1e-12)

    def test_batch_means_uses_twenty_batches(self):
        x = np.arange(100.0)
        assert stats.n_batches(100) == 20
        m, se = stats.batch_means(x)
        assert m == pytest.approx(49.5)
        means = x.reshape(20, 5).mean(axis=1)
        assert se == pytest.approx(means.std(ddof=1) / math.sqrt(20))


class TestPersistence:
    @pytest.mark.parametrize("suffix", [".csv", ".npz"])
    def test_round_trip(self, tmp_path, suffix):
        ens = gb.sample_gibbs(PEND, 1.3, 300, burn_in=50, thin=2, proposal_scale=1.2, seed=8)
        path = gb.save_ensemble(ens, tmp_path / f"e{suffix}")
        back = gb.load_ensemble(path, PEND)
        assert np.array_equal(back.samples, ens.samples)
        assert (back.beta, back.seed, back.system_name, back.r) == (1.3, 8, "pendulum", 1)
        assert back.acceptance_rate == ens.acceptance_rate

    def test_csv_layout(self, tmp_path):
        ens = gb.sample_gibbs(dyn.builtin("product"), 1.0, 5, burn_in=0, proposal_scale=1.0, seed=0)
        text = gb.save_ensemble(ens, tmp_path / "e.csv").read_text().splitlines()
        header = [ln for ln in text if not ln.startswith("#")][0]
        assert header == "q1,q2,p1,p2"
        assert "# beta=1.0" in text and "# system=product" in text

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("q1,p1\n1,2\n")
        with pytest.raises(ValueError):
            gb.load_ensemble(p)


def test_ess_is_bounded_by_n(ho):
    for v in ho.ess.values():
        assert 0 < v <= ho.n


def test_ess_of_iid_sample_is_close_to_n():
    x = np.random.default_rng(0).normal(size=20_000)
    assert stats.effective_sample_size(x) > 0.8 * x.size
