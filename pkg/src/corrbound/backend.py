"""Kernel backend selection.

The compiled extension ``corrbound._kernels`` is used when it imports;
otherwise the numpy implementation in ``corrbound._fallback`` is used.
Set ``CORRBOUND_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _fallback
from .program import ERROR_MESSAGES, Program, ProgramSet

log = logging.getLogger(__name__)

try:  # pragma: no cover - depends on build
    from . import _kernels
except ImportError:  # pragma: no cover
    _kernels = None

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


class KernelError(RuntimeError):
    """Numerical failure inside a kernel (domain error or non-finite state)."""

    def __init__(self, message: str, index: int = -1, step: int = -1):
        self.index = index
        self.step = step
        super().__init__(message)


def _message(code: int) -> str:
    if code == _fallback.ERR_NONFINITE:
        return "non-finite state produced"
    return ERROR_MESSAGES.get(code, f"kernel error {code}")


@dataclass
class OrbitResult:
    a0: np.ndarray  # (n, m) observables at t=0
    integral_checks: np.ndarray  # (n, m, len(checks)) integrals up to each checkpoint step
    integral_full: np.ndarray  # (n, m)
    x_end: np.ndarray
    drift_abs: np.ndarray  # (n, k) max |H_j(t) - H_j(0)|
    h0: np.ndarray  # (n, k)


class Backend:
    name = "base"

    def eval_batch(self, prog: Program, X: np.ndarray) -> np.ndarray:
        vals, err, bad = self._eval_batch(prog, np.ascontiguousarray(X, dtype=np.float64))
        if err:
            raise KernelError(f"{_message(err)} while evaluating {prog.source!r} at sample {bad}", index=bad)
        return vals

    def leapfrog_orbits(self, forces: ProgramSet, observables: ProgramSet, conserved: ProgramSet | None,
                        X0: np.ndarray, dt: float, nsteps: int, checks=(),
                        drift_stride: int = 10) -> OrbitResult:
        X0 = np.ascontiguousarray(X0, dtype=np.float64)
        checks = np.unique(np.asarray(checks, dtype=np.int64))
        checks = np.ascontiguousarray(checks[(checks >= 1) & (checks <= nsteps)])
        out = self._leapfrog_orbits(forces, observables, conserved, X0, float(dt), int(nsteps), checks,
                                    int(max(drift_stride, 1)))
        a0, ic, iff, xend, drift, h0, err, errstep = out
        bad = np.flatnonzero(err)
        if bad.size:
            i = int(bad[0])
            raise KernelError(
                f"{_message(int(err[i]))} in trajectory {i} at step {int(errstep[i])}", index=i, step=int(errstep[i])
            )
        return OrbitResult(a0, ic[:, :, : checks.size], iff, xend, drift, h0)

    def leapfrog_record(self, forces: ProgramSet, x0: np.ndarray, dt: float, nsteps: int) -> np.ndarray:
        states, err, step = self._leapfrog_record(forces, np.ascontiguousarray(x0, dtype=np.float64), float(dt),
                                                  int(nsteps))
        if err:
            raise KernelError(f"{_message(err)} at step {step}", step=step)
        return states

    def metropolis(self, hprog: Program, x: np.ndarray, hx: float, beta: float, scale: float,
                   normals: np.ndarray, uniforms: np.ndarray, periodic: np.ndarray, thin: int,
                   out: np.ndarray):
        return self._metropolis(hprog, x, hx, beta, scale, normals, uniforms, periodic, thin, out)


class CompiledBackend(Backend):
    name = "compiled"

    def _eval_batch(self, prog, X):
        return _kernels.eval_batch(prog.code, prog.consts, X, _threads)

    def _leapfrog_orbits(self, forces, aset, conserved, X0, dt, nsteps, checks, stride):
        if conserved is None:
            hc, ho, hk, hkc = np.zeros(0, np.int32), np.zeros(1, np.int32), np.zeros(1), np.zeros(1, np.int32)
        else:
            hc, ho, hk, hkc = conserved.code, conserved.code_offsets, conserved.consts, conserved.const_offsets
        return _kernels.leapfrog_orbits(
            forces.code, forces.code_offsets, forces.consts, forces.const_offsets,
            aset.code, aset.code_offsets, aset.consts, aset.const_offsets,
            _nonempty(hc), ho, hk, hkc,
            X0, dt, nsteps, checks if checks.size else np.zeros(1, np.int64) - 1, stride, _threads,
        )

    def _leapfrog_record(self, forces, x0, dt, nsteps):
        return _kernels.leapfrog_record(forces.code, forces.code_offsets, forces.consts, forces.const_offsets,
                                        x0, dt, nsteps)

    def _metropolis(self, hprog, x, hx, beta, scale, normals, uniforms, periodic, thin, out):
        consts = hprog.consts if len(hprog.consts) else np.zeros(1)
        return _kernels.metropolis(hprog.code, consts, x, hx, beta, scale,
                                   np.ascontiguousarray(normals), np.ascontiguousarray(uniforms),
                                   np.ascontiguousarray(periodic, dtype=np.uint8), thin, out)


def _nonempty(code: np.ndarray) -> np.ndarray:
    # memoryviews need at least one element to take an address
    return code if code.size else np.zeros(2, dtype=np.int32)


class NumpyBackend(Backend):
    name = "python"

    def _eval_batch(self, prog, X):
        return _fallback.eval_batch(prog, X)

    def _leapfrog_orbits(self, forces, aset, conserved, X0, dt, nsteps, checks, stride):
        return _fallback.leapfrog_orbits(forces, aset, conserved, X0, dt, nsteps, checks, stride)

    def _leapfrog_record(self, forces, x0, dt, nsteps):
        return _fallback.leapfrog_record(forces, x0, dt, nsteps)

    def _metropolis(self, hprog, x, hx, beta, scale, normals, uniforms, periodic, thin, out):
        return _fallback.metropolis(hprog, x, hx, beta, scale, normals, uniforms, periodic, thin, out)


_BACKENDS: dict[str, Backend] = {"python": NumpyBackend()}
if _kernels is not None:
    _BACKENDS["compiled"] = CompiledBackend()


def available() -> list[str]:
    return list(_BACKENDS)


_default: str | None = None


def set_default(name: str | None) -> None:
    """Backend used when callers do not pass one; ``None`` restores automatic choice."""
    global _default
    if name is not None:
        get_backend(name)
    _default = name


def get_backend(name: str | None = None) -> Backend:
    if name is None:
        name = _default or os.environ.get("CORRBOUND_BACKEND", "compiled" if _kernels is not None else "python")
    if name not in _BACKENDS:
        if name == "compiled":
            log.warning("compiled kernels unavailable, using numpy fallback")
            return _BACKENDS["python"]
        raise ValueError(f"unknown backend {name!r}; available: {available()}")
    return _BACKENDS[name]
