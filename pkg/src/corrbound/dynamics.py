"""Hamiltonian systems and symplectic (leapfrog) integration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex
from .backend import Backend, OrbitResult, get_backend
from .program import Program, ProgramSet, compile_expression, pack

DEFAULT_MAX_STEPS = 10**8
DEFAULT_DRIFT_TOL = 1e-4


class NonSeparableError(ValueError):
    pass


class StepCapError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseState:
    q: tuple[float, ...]
    p: tuple[float, ...]

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        p = tuple(float(v) for v in self.p)
        if len(q) != len(p) or not q:
            raise ValueError("q and p must have equal length r >= 1")
        if not all(math.isfinite(v) for v in q + p):
            raise ValueError("phase state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def r(self) -> int:
        return len(self.q)

    def as_array(self) -> np.ndarray:
        return np.array(self.q + self.p, dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> "PhaseState":
        x = np.asarray(x, dtype=np.float64)
        r = x.shape[0] // 2
        return cls(tuple(x[:r]), tuple(x[r:]))


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """A separable Hamiltonian system with declared conserved quantities.

    ``conserved[0]`` must be the Hamiltonian itself. ``periodic`` flags the
    coordinates that live on a circle of length 2π. ``factors`` optionally
    declares a product structure H = Σ_i factors[i](q_i, p_i) used by the
    level-set averaging code.
    """

    r: int
    hamiltonian: ex.Expression
    conserved: tuple[ex.Expression, ...]
    name: str = "custom"
    periodic: tuple[bool, ...] = ()
    factors: tuple[ex.Expression, ...] | None = None
    conserved_src: tuple[str, ...] = ()

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if not self.conserved or self.conserved[0] != self.hamiltonian:
            raise ValueError("conserved[0] must be the Hamiltonian")
        for e in (self.hamiltonian, *self.conserved):
            if ex.max_index(e) > self.r:
                raise ValueError(f"expression {e} uses variables beyond r={self.r}")
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * self.r)
        if len(self.periodic) != self.r:
            raise ValueError("periodic must have one flag per coordinate")
        if self.factors is not None:
            if len(self.factors) != self.r:
                raise ValueError("a product system needs one factor per degree of freedom")
            for i, f in enumerate(self.factors, start=1):
                if ex.variables(f) - {("q", i), ("p", i)}:
                    raise ValueError(f"factor {i} must depend only on q{i}, p{i}")
        self._check_separable()

    @property
    def k(self) -> int:
        return len(self.conserved)

    def _check_separable(self):
        dq, dp = self.grad
        for i, d in enumerate(dq, start=1):
            if any(kind == "p" for kind, _ in ex.variables(d)):
                raise NonSeparableError(
                    f"dH/dq{i} = {d} depends on momenta; only separable H = T(p) + V(q) is supported"
                )
        for i, d in enumerate(dp, start=1):
            if any(kind == "q" for kind, _ in ex.variables(d)):
                raise NonSeparableError(
                    f"dH/dp{i} = {d} depends on coordinates; only separable H = T(p) + V(q) is supported"
                )

    @cached_property
    def grad(self) -> tuple[tuple[ex.Expression, ...], tuple[ex.Expression, ...]]:
        return ex.gradient(self.hamiltonian, self.r)

    @cached_property
    def force_programs(self) -> ProgramSet:
        dq, dp = self.grad
        return pack([compile_expression(e, self.r) for e in (*dq, *dp)])

    @cached_property
    def conserved_programs(self) -> ProgramSet:
        return pack([compile_expression(e, self.r) for e in self.conserved])

    @cached_property
    def hamiltonian_program(self) -> Program:
        return compile_expression(self.hamiltonian, self.r)

    def parse(self, text: str) -> ex.Expression:
        """Parse an observable for this system; ``H1..Hk`` expand to the conserved quantities."""
        return ex.parse(text, self.r, ex.conserved_macros(self.conserved))

    def program(self, e: ex.Expression | str) -> Program:
        if isinstance(e, str):
            e = self.parse(e)
        return compile_expression(e, self.r)

    def evaluate(self, e: ex.Expression | str, X: np.ndarray, backend: Backend | None = None) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return (backend or get_backend()).eval_batch(self.program(e), X)

    def conserved_values(self, X: np.ndarray, backend: Backend | None = None) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        b = backend or get_backend()
        return np.column_stack([b.eval_batch(p, X) for p in self.conserved_programs.programs])


def make_system(r: int, hamiltonian: str, conserved: Sequence[str] = (), name: str = "custom",
                periodic: Sequence[int] = (), factors: Sequence[str] | None = None) -> SystemSpec:
    """Build a system from expression text.

    ``conserved`` lists H_2..H_k (H_1 is always the Hamiltonian); entries may
    refer to earlier quantities as H1, H2, ... ``periodic`` lists 1-based
    coordinate indices that are angles.
    """
    H = ex.parse(hamiltonian, r)
    cons = [H]
    for text in conserved:
        cons.append(ex.parse(text, r, ex.conserved_macros(cons)))
    flags = tuple((i + 1) in set(periodic) for i in range(r))
    fac = None if factors is None else tuple(ex.parse(f, r) for f in factors)
    return SystemSpec(r=r, hamiltonian=H, conserved=tuple(cons), name=name, periodic=flags, factors=fac,
                      conserved_src=(hamiltonian, *conserved))


def harmonic_oscillator() -> SystemSpec:
    return make_system(1, "p1^2/2 + q1^2/2", name="oscillator", factors=["p1^2/2 + q1^2/2"])


def two_oscillators() -> SystemSpec:
    """Uncoupled oscillators with frequencies 1 and √2; H2 is the second energy."""
    h2 = "p2^2/2 + q2^2"
    return make_system(2, f"p1^2/2 + q1^2/2 + {h2}", [h2], name="product",
                       factors=["p1^2/2 + q1^2/2", h2])


def pendulum() -> SystemSpec:
    return make_system(1, "p1^2/2 - cos(q1)", name="pendulum", periodic=[1])


BUILTIN_SYSTEMS = {
    "oscillator": harmonic_oscillator,
    "product": two_oscillators,
    "pendulum": pendulum,
}


def builtin(name: str) -> SystemSpec:
    try:
        return BUILTIN_SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown built-in system {name!r}; choose from {sorted(BUILTIN_SYSTEMS)}") from None


# ------------------------------------------------------------------ integration


@dataclass
class Trajectory:
    dt: float
    states: np.ndarray  # (n_steps + 1, 2r), columns q1..qr, p1..pr
    drift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i) -> PhaseState:
        return PhaseState.from_array(self.states[i])

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self))

    @property
    def q(self) -> np.ndarray:
        return self.states[:, : self.states.shape[1] // 2]

    @property
    def p(self) -> np.ndarray:
        return self.states[:, self.states.shape[1] // 2 :]


def _as_array(sys: SystemSpec, s) -> np.ndarray:
    x = s.as_array() if isinstance(s, PhaseState) else np.asarray(s, dtype=np.float64)
    if x.shape != (2 * sys.r,):
        raise ValueError(f"state dimension {x.shape} does not match system r={sys.r}")
    return x


def step_verlet(sys: SystemSpec, s: PhaseState, dt: float, backend: Backend | None = None) -> PhaseState:
    """One kick-drift-kick leapfrog step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    states = (backend or get_backend()).leapfrog_record(sys.force_programs, _as_array(sys, s), dt, 1)
    return PhaseState.from_array(states[-1])


def n_steps(T: float, dt: float, max_steps: int = DEFAULT_MAX_STEPS) -> int:
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    n = int(math.floor(T / dt + 1e-9))
    if n < 1:
        raise ValueError(f"T={T} shorter than one step dt={dt}")
    if n > max_steps:
        raise StepCapError(f"T/dt = {n} steps exceeds the step cap {max_steps}")
    return n


def integrate(sys: SystemSpec, s0: PhaseState, T: float, dt: float, max_steps: int = DEFAULT_MAX_STEPS,
              drift_tol: float = DEFAULT_DRIFT_TOL, backend: Backend | None = None) -> Trajectory:
    """Integrate from ``s0`` over [0, T] and record every state plus conservation drift."""
    n = n_steps(T, dt, max_steps)
    states = (backend or get_backend()).leapfrog_record(sys.force_programs, _as_array(sys, s0), dt, n)
    traj = Trajectory(dt=dt, states=states)
    traj.drift = conserved_drift(traj, sys, backend=backend)
    for i, d in enumerate(traj.drift):
        if d > drift_tol:
            traj.warnings.append(f"drift of conserved quantity H{i + 1} = {d:.3g} exceeds tolerance {drift_tol:g}")
    return traj


def relative_drift(values: np.ndarray) -> float:
    v0 = values[0]
    return float(np.max(np.abs(values - v0)) / max(1.0, abs(v0)))


def conserved_drift(traj: Trajectory, sys: SystemSpec, extra: Sequence[ex.Expression] = (),
                    backend: Backend | None = None) -> np.ndarray:
    """max_t |H_i(t) - H_i(0)| / max(1, |H_i(0)|) for each conserved quantity (and any extras)."""
    b = backend or get_backend()
    out = []
    for e in (*sys.conserved, *extra):
        vals = b.eval_batch(compile_expression(e, sys.r), traj.states)
        out.append(relative_drift(vals))
    return np.asarray(out)


def run_orbits(sys: SystemSpec, observables: Sequence[ex.Expression], X0: np.ndarray, T: float, dt: float,
               max_steps: int = DEFAULT_MAX_STEPS, drift_stride: int = 10, checks: Sequence[int] = (),
               backend: Backend | None = None) -> tuple[OrbitResult, int]:
    """Batch leapfrog from every row of ``X0`` accumulating trapezoid integrals of each observable.

    Returns the kernel result (observable arrays have one column per entry of
    ``observables``; partial integrals are kept at the step numbers in
    ``checks``) and the number of steps taken.
    """
    n = n_steps(T, dt, max_steps)
    aset = pack([compile_expression(a, sys.r) for a in observables])
    res = (backend or get_backend()).leapfrog_orbits(
        sys.force_programs, aset, sys.conserved_programs, X0, dt, n, checks=checks, drift_stride=drift_stride,
    )
    return res, n
