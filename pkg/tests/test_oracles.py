"""Cross-checks of the closed-form oracles used by the verification suites."""
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import factorial, i0

from corrbound import dynamics as dyn
from corrbound import regular as rg
from corrbound.verify import QUADRATURE_ORACLES, pendulum_C_oracle

PEND = dyn.builtin("pendulum")


def rotation_period(E):
    return quad(lambda q: 1.0 / math.sqrt(2.0 * (E + math.cos(q))), 0.0, 2.0 * math.pi, epsabs=1e-13, limit=200)[0]


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_pendulum_oracle_against_period_integral(beta):
    Z = 2 * math.pi * i0(beta) * math.sqrt(2 * math.pi / beta)
    num = 2 * quad(lambda E: (2 * math.pi) ** 2 / rotation_period(E) * math.exp(-beta * E), 1.0, 1.0 + 60 / beta,
                   limit=400, points=[1.0 + 1e-6])[0]
    assert pendulum_C_oracle(beta) == pytest.approx(num / Z, rel=1e-6)


def test_pendulum_oracle_against_orbit_averages():
    # rotating branch only, one direction; A^H = 2π/T(E) from the integrator
    x, w = np.polynomial.legendre.leggauss(48)
    u = 0.5 * (x + 1) * math.sqrt(40.0)  # E - 1 = u², which tames the log singularity at the separatrix
    wu = 0.5 * math.sqrt(40.0) * w
    total = 0.0
    for ui, wi in zip(u, wu):
        E = 1.0 + ui * ui
        start = dyn.PhaseState((0.0,), (math.sqrt(2 * (E + 1)),))
        r = rg.level_set_average(PEND, "p1", E, start_hint=start, dt=1e-3)
        total += wi * 2 * ui * r.value ** 2 * r.period * math.exp(-E)
    Z = 2 * math.pi * i0(1.0) * math.sqrt(2 * math.pi)
    assert 2 * total / Z == pytest.approx(pendulum_C_oracle(1.0), rel=1e-4)


def test_pendulum_reference_value():
    assert pendulum_C_oracle(1.0) == pytest.approx(0.410230, abs=5e-6)


@pytest.mark.parametrize("n", range(6))
def test_gamma_moments(n):
    # <H^n> for the one-degree oscillator, E ~ Exp(β)
    beta = 1.7
    val = quad(lambda E: E ** n * beta * math.exp(-beta * E), 0, math.inf)[0]
    assert val == pytest.approx(factorial(n) / beta ** n, rel=1e-10)


def test_quadrature_oracles_by_direct_integration():
    b = 1.3
    e = lambda f: quad(lambda E: f(E) * b * math.exp(-b * E), 0, math.inf)[0]  # noqa: E731
    assert QUADRATURE_ORACLES[("oscillator", "q1^2")](b) == pytest.approx(e(lambda E: E * E))
    assert QUADRATURE_ORACLES[("oscillator", "H1^2")](b) == pytest.approx(e(lambda E: E ** 4))
    assert QUADRATURE_ORACLES[("product", "q1^2*q2^2")](b) == pytest.approx(e(lambda E: E * E) ** 2 / 4)
    gamma2 = quad(lambda S: S ** 4 * b * b * S * math.exp(-b * S), 0, math.inf)[0]
    assert QUADRATURE_ORACLES[("product", "H1^2")](b) == pytest.approx(gamma2)


def test_torus_average_of_q_squared_product():
    # on the torus E1, E2 the product system averages q1² q2² to E1·E2/2
    sys = dyn.builtin("product")
    alphas = np.array([[0.5, 1.0], [2.0, 0.3]])
    vals = rg.torus_average(sys, "q1^2*q2^2", alphas, T=2000.0, dt=0.01)
    np.testing.assert_allclose(vals, alphas[:, 0] * alphas[:, 1] / 2, rtol=5e-3)
