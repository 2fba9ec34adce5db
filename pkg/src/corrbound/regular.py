"""Level-set averages for ergodically regular systems.

For one degree of freedom a regular level set {H = α} is a closed orbit, and
the microcanonical average A^H(α) is the time average of A over one period
T(α). The period is also the induced volume of the level set, so

    ‖A^H‖²_D = ∫ A^H(α)² T(α) e^{-βα} dα / ∫ T(α) e^{-βα} dα.

For a product of one-dimensional systems with incommensurate frequencies
the level sets are tori on which the flow is ergodic; A^H is a long-time
average and the volume is the product of the per-factor periods.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq, minimize

from . import expr as ex
from .backend import Backend, get_backend
from .dynamics import PhaseState, SystemSpec, make_system, run_orbits
from .program import compile_expression

DEFAULT_NODES = 64
DEFAULT_PRODUCT_NODES = 24
DEFAULT_SPAN = 40.0
DEFAULT_DT = 1e-3
DEFAULT_TORUS_T = 2000.0
DEFAULT_TORUS_DT = 0.02
SEPARATRIX_TOL = 1e-4  # floor on min|∇H| / max|∇H| along a closed orbit (raised to 2·dt)
_CHUNK = 20_000


class RegularityError(ValueError):
    """The system or energy range is outside what the level-set machinery handles."""


class PeriodNotFound(RuntimeError):
    pass


@dataclass
class LevelSetAverage:
    alpha: tuple[float, ...]
    value: float
    component: str
    period: float | tuple[float, ...]
    n_steps: int = 0


class _Scalar:
    """Vectorised evaluation of one expression on a 1-DOF or general system."""

    def __init__(self, sys: SystemSpec, e: ex.Expression, backend: Backend):
        self.prog = compile_expression(e, sys.r)
        self.b = backend

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.b.eval_batch(self.prog, np.atleast_2d(X))


def _as_expr(sys: SystemSpec, A) -> ex.Expression:
    return sys.parse(A) if isinstance(A, str) else A


def energy_minimum(sys: SystemSpec) -> tuple[float, np.ndarray]:
    """Minimum of H and a minimiser, found from the origin with analytic gradients."""
    b = get_backend()
    H = _Scalar(sys, sys.hamiltonian, b)
    dq, dp = sys.grad
    grads = [_Scalar(sys, g, b) for g in (*dq, *dp)]
    res = minimize(lambda x: float(H(x)[0]), np.zeros(2 * sys.r),
                   jac=lambda x: np.array([float(g(x)[0]) for g in grads]), method="BFGS",
                   options={"gtol": 1e-12})
    return float(res.fun), res.x


def project_to_level(sys: SystemSpec, x: np.ndarray, alpha: float, tol: float = 1e-12,
                     max_iter: int = 100) -> np.ndarray:
    """Newton steps along ∇H until H(x) = alpha."""
    b = get_backend()
    H = _Scalar(sys, sys.hamiltonian, b)
    dq, dp = sys.grad
    grads = [_Scalar(sys, g, b) for g in (*dq, *dp)]
    x = np.array(x, dtype=np.float64)
    for _ in range(max_iter):
        r = float(H(x)[0]) - alpha
        if abs(r) <= tol * max(1.0, abs(alpha)):
            return x
        g = np.array([float(f(x)[0]) for f in grads])
        gg = float(g @ g)
        if gg == 0:
            break
        x = x - r * g / gg
    raise RegularityError(f"could not move the start point onto the level set H = {alpha}")


def default_start(sys: SystemSpec, alpha: float) -> np.ndarray:
    """A point with H = alpha: a turning point (p = 0, q right of the minimum) if one exists, else q at the minimum."""
    if sys.r != 1:
        raise RegularityError("default_start is for one degree of freedom")
    emin, xmin = energy_minimum(sys)
    if alpha <= emin:
        raise RegularityError(f"energy {alpha} is not above the minimum {emin}")
    b = get_backend()
    H = _Scalar(sys, sys.hamiltonian, b)
    q0, p0 = xmin
    f = lambda q: float(H(np.array([q, p0]))[0]) - alpha  # noqa: E731
    reach = math.pi if sys.periodic[0] else 1.0
    step = reach
    while step <= (math.pi if sys.periodic[0] else 1e8):
        if f(q0 + step) > 0:
            return np.array([brentq(f, q0, q0 + step, xtol=1e-15, rtol=1e-15), p0])
        if sys.periodic[0]:
            break
        step *= 2.0
    g = lambda p: float(H(np.array([q0, p]))[0]) - alpha  # noqa: E731
    step = 1.0
    while g(p0 + step) <= 0:
        step *= 2.0
        if step > 1e8:
            raise RegularityError(f"no point with H = {alpha} found")
    return np.array([q0, brentq(g, p0, p0 + step, xtol=1e-15, rtol=1e-15)])


def level_set_average(sys: SystemSpec, A, alpha: float, start_hint: PhaseState | np.ndarray | None = None,
                      dt: float = DEFAULT_DT, max_steps: int = 10**7, energy_tol: float = 1e-6,
                      backend: Backend | None = None) -> LevelSetAverage:
    """One-period time average of ``A`` on the closed orbit H = alpha of a 1-DOF system.

    The period is the first return to a Poincaré section through the start
    (q = q0 when q moves faster than p there, else p = p0), crossed in the
    same direction; for angles the shifted sections q0 ± 2π count too. The
    crossing time is refined with cubic Hermite interpolation of the leapfrog
    states.
    """
    if sys.r != 1:
        raise RegularityError("level_set_average handles one degree of freedom; use torus_average for products")
    b = backend or get_backend()
    A = _as_expr(sys, A)
    if start_hint is None:
        x0 = default_start(sys, alpha)
    else:
        x0 = start_hint.as_array() if isinstance(start_hint, PhaseState) else np.asarray(start_hint, float)
        x0 = project_to_level(sys, x0, alpha)
    H = _Scalar(sys, sys.hamiltonian, b)
    if abs(float(H(x0)[0]) - alpha) > energy_tol * max(1.0, abs(alpha)):
        raise RegularityError(f"start point energy differs from {alpha} beyond tolerance")

    dHdq = _Scalar(sys, sys.grad[0][0], b)
    dHdp = _Scalar(sys, sys.grad[1][0], b)
    Aval = _Scalar(sys, A, b)
    qdot0 = float(dHdp(x0)[0])
    pdot0 = -float(dHdq(x0)[0])
    if abs(qdot0) >= abs(pdot0):
        col, sigma = 0, math.copysign(1.0, qdot0)
        levels = [0.0, 2 * math.pi, -2 * math.pi] if sys.periodic[0] else [0.0]
        rate = lambda S: dHdp(S)  # noqa: E731
    else:
        col, sigma = 1, math.copysign(1.0, pdot0)
        levels = [0.0]
        rate = lambda S: -dHdq(S)  # noqa: E731
    if qdot0 == 0 and pdot0 == 0:
        raise RegularityError(f"start point is an equilibrium; energy {alpha} is not a regular value")

    x = x0.copy()
    integral = 0.0
    vmin, vmax = math.inf, 0.0
    t0 = 0.0
    steps = 0
    while steps < max_steps:
        n = min(_CHUNK, max_steps - steps)
        S = b.leapfrog_record(sys.force_programs, x, dt, n)
        s = S[:, col] - x0[col]
        hit, lev = None, 0.0
        for ell in levels:
            before = (s[:-1] - ell) * sigma < 0
            after = (s[1:] - ell) * sigma >= 0
            idx = np.flatnonzero(before & after)
            if idx.size and (hit is None or idx[0] < hit):
                hit, lev = int(idx[0]), ell
        a = Aval(S)
        seen = S if hit is None else S[: hit + 2]
        speed = np.hypot(dHdq(seen), dHdp(seen))
        vmin, vmax = min(vmin, float(speed.min())), max(vmax, float(speed.max()))
        if hit is None:
            integral += dt * (a.sum() - 0.5 * (a[0] + a[-1]))
            x = S[-1]
            t0 += n * dt
            steps += n
            continue
        # the discrete flow always slips past a saddle, so closeness is judged from the speed profile
        if vmin < max(SEPARATRIX_TOL, 2 * dt) * vmax:
            raise RegularityError(f"orbit at energy {alpha} slows to {vmin / vmax:.2g} of its top phase-space speed; "
                                  "the energy is at or near a separatrix")
        i = hit  # crossing within [i, i+1]
        integral += dt * (a[: i + 1].sum() - 0.5 * (a[0] + a[i]))
        spl = CubicHermiteSpline([0.0, dt], s[i : i + 2] - lev, rate(S[i : i + 2]))
        tau = dt if s[i + 1] == lev else brentq(spl, 0.0, dt, xtol=1e-15)
        a_tau = a[i] + (a[i + 1] - a[i]) * tau / dt
        integral += 0.5 * tau * (a[i] + a_tau)
        period = t0 + i * dt + tau
        comp = "closed"
        if sys.periodic[0]:
            comp = "librating" if lev == 0.0 else ("rotating+" if lev > 0 else "rotating-")
        return LevelSetAverage((alpha,), integral / period, comp, period, steps + i + 1)
    raise PeriodNotFound(f"no return to the section within {max_steps} steps at energy {alpha}; "
                         "the energy may be at or near a separatrix")


# ------------------------------------------------------------------ products


def factor_system(sys: SystemSpec, i: int) -> SystemSpec:
    """The 1-DOF system H = factors[i](q, p) re-indexed to (q1, p1)."""
    if sys.factors is None:
        raise RegularityError(f"system {sys.name!r} declares no product structure")
    j = i + 1
    e = ex.substitute(sys.factors[i], {("q", j): ex.Var("q", 1), ("p", j): ex.Var("p", 1)})
    return make_system(1, ex.pretty(e), name=f"{sys.name}[{j}]", periodic=[1] if sys.periodic[i] else [])


def torus_average(sys: SystemSpec, A, alphas: np.ndarray, T: float = DEFAULT_TORUS_T, dt: float = DEFAULT_TORUS_DT,
                  backend: Backend | None = None) -> np.ndarray:
    """Long-time averages of ``A`` on the tori H_factor = alpha (one row of ``alphas`` per torus)."""
    A = _as_expr(sys, A)
    alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    facs = [factor_system(sys, i) for i in range(sys.r)]
    X0 = np.empty((alphas.shape[0], 2 * sys.r))
    for i, f in enumerate(facs):
        starts = {}
        for row, a in enumerate(alphas[:, i]):
            if a not in starts:
                starts[a] = default_start(f, float(a))
            X0[row, i], X0[row, sys.r + i] = starts[a]
    n = max(1, math.ceil(T / dt - 1e-9))
    res, _ = run_orbits(sys, [A], X0, T, T / n, backend=backend)
    return res.integral_full[:, 0] / T


# ------------------------------------------------------------------ quadrature


@dataclass
class LevelSetTable:
    """A^H on a quadrature grid of energies with the normalised μ_D weights."""

    alphas: np.ndarray  # (m, k_grid)
    values: np.ndarray  # (m,)
    periods: np.ndarray  # (m,) level-set volume
    weights: np.ndarray  # (m,) normalised: Σ = 1
    beta: float
    observable: str = ""
    components: list[str] = field(default_factory=list)

    def norm_squared(self) -> float:
        return float(self.weights @ (self.values * self.values))

    def inner(self, h: Callable[[np.ndarray], np.ndarray]) -> float:
        """⟨A^H, h⟩_D for a function h of the energies."""
        return float(self.weights @ (self.values * np.asarray(h(self.alphas))))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        k = self.alphas.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"alpha{j + 1}" for j in range(k)] + ["A_H", "volume", "weight"])
            for a, v, p, wt in zip(self.alphas, self.values, self.periods, self.weights):
                w.writerow([repr(float(x)) for x in a] + [repr(float(v)), repr(float(p)), repr(float(wt))])
        return path


def check_regular(sys: SystemSpec, emax: float) -> None:
    """Reject systems whose level sets up to ``emax`` may have several components."""
    if any(sys.periodic):
        raise RegularityError(
            f"system {sys.name!r} has angle coordinates, so level sets split into several components "
            "(e.g. rotations in both directions); use an invariant labeler and the partitioned bound instead"
        )
    if sys.r == 1:
        emin, xmin = energy_minimum(sys)
        b = get_backend()
        H = _Scalar(sys, sys.hamiltonian, b)
        L = 1.0
        while L < 1e6 and (float(H(np.array([xmin[0] - L, xmin[1]]))[0]) < emax
                           or float(H(np.array([xmin[0] + L, xmin[1]]))[0]) < emax):
            L *= 2.0
        q = np.linspace(xmin[0] - L, xmin[0] + L, 20001)
        v = H(np.column_stack([q, np.full_like(q, xmin[1])]))
        interior = (v[1:-1] < v[:-2]) & (v[1:-1] < v[2:]) & (v[1:-1] < emax)
        if int(interior.sum()) > 1:
            raise RegularityError("potential has several wells below the integration range; level sets are not connected")
    elif sys.factors is None:
        raise RegularityError("only one degree of freedom or declared products of 1-DOF factors are supported")


def _gauss(n: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return lo + 0.5 * (hi - lo) * (x + 1), 0.5 * (hi - lo) * w


def level_set_table(sys: SystemSpec, A, beta: float, n_nodes: int | None = None, span: float = DEFAULT_SPAN,
                    dt: float | None = None, T_torus: float = DEFAULT_TORUS_T,
                    backend: Backend | None = None) -> LevelSetTable:
    """Tabulate A^H at Gauss–Legendre energies on [E_min, E_min + span/β] (per factor for products)."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    A = _as_expr(sys, A)
    name = ex.pretty(A)
    if sys.r == 1:
        emin, _ = energy_minimum(sys)
        check_regular(sys, emin + span / beta)
        n = n_nodes or DEFAULT_NODES
        E, w = _gauss(n, emin, emin + span / beta)
        res = [level_set_average(sys, A, float(e), dt=dt or DEFAULT_DT, backend=backend) for e in E]
        periods = np.array([r.period for r in res])
        weights = w * periods * np.exp(-beta * (E - emin))
        return LevelSetTable(E[:, None], np.array([r.value for r in res]), periods, weights / weights.sum(), beta,
                             name, [r.component for r in res])
    check_regular(sys, math.inf)
    n = n_nodes or DEFAULT_PRODUCT_NODES
    facs = [factor_system(sys, i) for i in range(sys.r)]
    axes, axw, axT, mins = [], [], [], []
    for f in facs:
        emin, _ = energy_minimum(f)
        check_regular(f, emin + span / beta)
        E, w = _gauss(n, emin, emin + span / beta)
        T = np.array([level_set_average(f, "1", float(e), dt=DEFAULT_DT, backend=backend).period for e in E])
        axes.append(E)
        axw.append(w * T * np.exp(-beta * (E - emin)))
        axT.append(T)
        mins.append(emin)
    grids = np.meshgrid(*axes, indexing="ij")
    alphas = np.column_stack([g.ravel() for g in grids])
    weights = np.ones(alphas.shape[0])
    vols = np.ones(alphas.shape[0])
    for i, g in enumerate(np.meshgrid(*axw, indexing="ij")):
        weights *= g.ravel()
    for g in np.meshgrid(*axT, indexing="ij"):
        vols *= g.ravel()
    values = torus_average(sys, A, alphas, T=T_torus, dt=dt or DEFAULT_TORUS_DT, backend=backend)
    return LevelSetTable(alphas, values, vols, weights / weights.sum(), beta, name, ["torus"] * alphas.shape[0])


def norm_AH_squared(sys: SystemSpec, A, beta: float, n_nodes: int | None = None, span: float = DEFAULT_SPAN,
                    dt: float | None = None, T_torus: float = DEFAULT_TORUS_T, backend: Backend | None = None) -> float:
    """‖A^H‖²_D by quadrature over the energies."""
    return level_set_table(sys, A, beta, n_nodes, span, dt, T_torus, backend).norm_squared()
