"""Finite-horizon estimates of the autocorrelation time average C(A).

Two estimators share one batch of trajectories started from the Gibbs
ensemble:

* ``norm_of_orbital_average``: the ensemble mean of Ā_T(m)², where Ā_T is
  the trapezoid time average of A along the orbit through m.
* ``direct_time_integral``: (1/T)∫₀ᵀ φ(t) dt with φ(t) = ⟨A⁰, Aᵗ⟩_β.

Finite horizons bias both estimators by O(1/T). Besides the value at T
each estimate records the value at T/2 and the largest deviation of the
running estimate from its final value over checkpoints spread across
[T/2, T] (``systematic``); the latter enters ``total_error``.

Because the trapezoid rule is linear, the direct estimator on the full
integrator grid equals the ensemble mean of A(m)·Ā_T(m); it is evaluated in
that form so no per-step reduction across trajectories is needed.
:func:`correlation_function` exposes φ itself on a coarser grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from . import stats
from .backend import Backend, get_backend
from .dynamics import DEFAULT_DRIFT_TOL, DEFAULT_MAX_STEPS, PhaseState, SystemSpec, run_orbits
from .gibbs import GibbsEnsemble
from .program import compile_expression, pack

NORM = "norm_of_orbital_average"
DIRECT = "direct_time_integral"
METHODS = (NORM, DIRECT)
N_CHECKS = 9


@dataclass
class CEstimate:
    value: float
    stderr: float
    method: str
    T: float
    dt: float
    n_ensemble: int
    bias_note: dict = field(default_factory=dict)
    observable: str = ""
    warnings: list[str] = field(default_factory=list)
    systematic: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.value < -3.0 * self.stderr - 1e-12:
            self.warnings.append(
                f"{self.method} estimate {self.value:.4g} is below -3 stderr ({self.stderr:.3g}); "
                "C(A) is a squared norm, so this points at a numerical problem"
            )

    @property
    def total_error(self) -> float:
        return math.hypot(self.stderr, self.systematic)

    def as_row(self) -> dict:
        return {"method": self.method, "T": self.T, "dt": self.dt, "n": self.n_ensemble,
                "value": self.value, "stderr": self.stderr}


def time_grid(T: float, dt: float, max_steps: int = DEFAULT_MAX_STEPS) -> tuple[int, float]:
    """Number of steps and the step actually used so that ``n * dt_used == T``.

    The requested ``dt`` is an upper bound; it is shrunk slightly when T/dt
    is not an integer so every average covers exactly [0, T].
    """
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    n = max(1, math.ceil(T / dt - 1e-9))
    if n > max_steps:
        raise ValueError(f"T/dt = {n} steps exceeds the step cap {max_steps}")
    return n, T / n


def _as_expr(sys: SystemSpec, A) -> ex.Expression:
    return sys.parse(A) if isinstance(A, str) else A


def _constant_value(A: ex.Expression) -> float | None:
    if ex.is_constant(A):
        return float(ex.evaluate(A, (), ()))
    return None


def orbital_average(sys: SystemSpec, A: ex.Expression | str, m: PhaseState | np.ndarray, T: float, dt: float,
                    backend: Backend | None = None) -> float:
    """Trapezoid time average of ``A`` over [0, T] along the orbit through ``m``."""
    A = _as_expr(sys, A)
    x = m.as_array() if isinstance(m, PhaseState) else np.asarray(m, dtype=np.float64)
    n, h = time_grid(T, dt)
    res, _ = run_orbits(sys, [A], x[None, :], n * h, h, max_steps=n, backend=backend)
    return float(res.integral_full[0, 0] / T)


@dataclass
class OrbitBatch:
    """Per-trajectory results shared by both estimators."""

    observables: list[str]
    a0: np.ndarray  # (n, m)
    avg: np.ndarray  # (n, m) Ā_T
    avg_checks: np.ndarray  # (n, m, K) running averages at check_times; the first is T/2
    check_times: np.ndarray  # (K,)
    T: float
    dt: float
    nsteps: int
    drift_rel: np.ndarray  # (n, k)
    constants: list[float | None]
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.a0.shape[0]

    @property
    def T_half(self) -> float:
        return float(self.check_times[0]) if self.check_times.size else math.nan

    @property
    def avg_half(self) -> np.ndarray:
        return self.avg_checks[:, :, 0]


def orbit_batch(sys: SystemSpec, observables: Sequence[ex.Expression | str], ens: GibbsEnsemble, T: float,
                dt: float, n_traj: int | None = None, drift_tol: float = DEFAULT_DRIFT_TOL,
                max_steps: int = DEFAULT_MAX_STEPS, backend: Backend | None = None) -> OrbitBatch:
    """Integrate one trajectory per ensemble point (or per point of an even subsample)."""
    if ens.r != sys.r:
        raise ValueError(f"ensemble dimension r={ens.r} does not match system r={sys.r}")
    exprs = [_as_expr(sys, a) for a in observables]
    sub = ens.subsample(n_traj)
    n, h = time_grid(T, dt, max_steps)
    checks = checkpoints(n)
    res, _ = run_orbits(sys, exprs, sub.samples, n * h, h, max_steps=max_steps, checks=checks, backend=backend)
    rel = res.drift_abs / np.maximum(1.0, np.abs(res.h0))
    warnings = []
    for j in range(rel.shape[1]):
        over = int(np.count_nonzero(rel[:, j] > drift_tol))
        if over:
            warnings.append(
                f"relative drift of H{j + 1} exceeds {drift_tol:g} on {over}/{sub.n} trajectories "
                f"(max {rel[:, j].max():.3g}); consider a smaller dt"
            )
    return OrbitBatch(
        observables=[ex.pretty(e) for e in exprs], a0=res.a0, avg=res.integral_full / T,
        avg_checks=res.integral_checks / (checks * h), check_times=checks * h, T=T, dt=h, nsteps=n,
        drift_rel=rel, constants=[_constant_value(e) for e in exprs], warnings=warnings,
    )


def checkpoints(n: int) -> np.ndarray:
    """Step numbers spread over [n/2, n) at which running averages are kept."""
    steps = np.unique(np.round(n * (0.5 + 0.5 * np.arange(N_CHECKS - 1) / (N_CHECKS - 1))).astype(np.int64))
    return steps[(steps >= 1) & (steps < n)]


def estimates_from_batch(batch: OrbitBatch, j: int = 0) -> tuple[CEstimate, CEstimate]:
    """Both C(A) estimates for observable ``j`` of a shared orbit batch."""
    name = batch.observables[j]
    c = batch.constants[j]
    common = dict(T=batch.T, dt=batch.dt, n_ensemble=batch.n, observable=name)
    if c is not None:
        # constants are flow-invariant; skip quadrature round-off
        note = {"T": batch.T, "value_T": c * c, "T_half": batch.T_half, "value_T_half": c * c,
                "stderr_T_half": 0.0, "horizon_spread": 0.0}
        return (CEstimate(c * c, 0.0, NORM, bias_note=dict(note), **common),
                CEstimate(c * c, 0.0, DIRECT, bias_note=dict(note), **common))
    a0, avg, chk = batch.a0[:, j], batch.avg[:, j], batch.avg_checks[:, j, :]
    out = []
    for method, final, running in ((NORM, avg * avg, chk * chk), (DIRECT, a0 * avg, a0[:, None] * chk)):
        v, se = stats.batch_means(final)
        if running.shape[1]:
            vh, seh = stats.batch_means(running[:, 0])
        else:
            vh, seh = math.nan, math.nan
        spread = float(np.max(np.abs(running.mean(axis=0) - v))) if running.shape[1] else 0.0
        note = {"T": batch.T, "value_T": v, "T_half": batch.T_half, "value_T_half": vh, "stderr_T_half": seh,
                "horizon_spread": spread}
        out.append(CEstimate(v, se, method, bias_note=note, warnings=list(batch.warnings), systematic=spread,
                             **common))
    return out[0], out[1]


def estimate_C(sys: SystemSpec, A: ex.Expression | str, ens: GibbsEnsemble, T: float, dt: float,
               n_traj: int | None = None, backend: Backend | None = None, **kw) -> tuple[CEstimate, CEstimate]:
    """(norm estimate, direct estimate) from one shared set of trajectories."""
    return estimates_from_batch(orbit_batch(sys, [A], ens, T, dt, n_traj, backend=backend, **kw), 0)


def estimate_C_norm(sys: SystemSpec, A: ex.Expression | str, ens: GibbsEnsemble, T: float, dt: float,
                    n_traj: int | None = None, backend: Backend | None = None, **kw) -> CEstimate:
    """C(A) ≈ mean over the ensemble of Ā_T(m)²; ``bias_note`` carries the T/2 value."""
    return estimate_C(sys, A, ens, T, dt, n_traj, backend, **kw)[0]


def estimate_C_direct(sys: SystemSpec, A: ex.Expression | str, ens: GibbsEnsemble, T: float, dt: float,
                      n_traj: int | None = None, backend: Backend | None = None, **kw) -> CEstimate:
    """C(A) ≈ (1/T)∫₀ᵀ ⟨A⁰, Aᵗ⟩_β dt by trapezoid on the integrator grid."""
    return estimate_C(sys, A, ens, T, dt, n_traj, backend, **kw)[1]


def combined_stderr(a: CEstimate, b: CEstimate) -> float:
    """Joint uncertainty of two estimates: statistical and finite-horizon terms in quadrature."""
    return math.hypot(a.total_error, b.total_error)


def correlation_function(sys: SystemSpec, A: ex.Expression | str, ens: GibbsEnsemble, T: float, dt: float,
                         stride: int = 10, n_traj: int | None = None,
                         backend: Backend | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """φ(t) = ⟨A⁰, Aᵗ⟩_β on the grid t = 0, stride·dt, 2·stride·dt, ... ≤ T.

    Returns (times, phi, stderr). Trajectories are advanced segment by segment,
    so memory stays O(n).
    """
    A = _as_expr(sys, A)
    sub = ens.subsample(n_traj)
    n, h = time_grid(T, dt)
    nseg = n // stride
    X = sub.samples.copy()
    b = backend or get_backend()
    aset = pack([compile_expression(A, sys.r)])
    seg_t = stride * h
    a_first = None
    phis, ses, times = [], [], []
    for s in range(nseg + 1):
        if s < nseg:
            res = b.leapfrog_orbits(sys.force_programs, aset, None, X, h, stride)
            at = res.a0[:, 0]
            X = res.x_end
        else:
            at = b.eval_batch(aset.programs[0], X)
        if a_first is None:
            a_first = at
        m, se = stats.batch_means(a_first * at)
        phis.append(m)
        ses.append(se)
        times.append(s * seg_t)
    return np.asarray(times), np.asarray(phis), np.asarray(ses)


def write_estimates_csv(estimates: Sequence[CEstimate], path: str | Path) -> Path:
    """Columns: method, T, dt, n, value, stderr (plus observable)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["observable", "method", "T", "dt", "n", "value", "stderr"])
        w.writeheader()
        for e in estimates:
            w.writerow({"observable": e.observable, **{k: (repr(v) if isinstance(v, float) else v)
                                                       for k, v in e.as_row().items()}})
    return path
