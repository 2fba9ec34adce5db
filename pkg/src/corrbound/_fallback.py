"""Pure numpy implementations of the kernels in ``_kernels.pyx``.

Batch routines vectorise over trajectories; the Metropolis chain is an
explicit Python loop since a single chain is inherently sequential.
"""
from __future__ import annotations

import math

import numpy as np

from .program import ERR_OK, Program, ProgramSet, run_numpy

ERR_NONFINITE = 10


def eval_batch(prog: Program, X: np.ndarray, nthreads: int = 1):
    return run_numpy(prog, X)


def _eval_set(ps: ProgramSet, first: int, count: int, X: np.ndarray, err: np.ndarray):
    out = np.empty((X.shape[0], count))
    for j in range(count):
        vals, e, bad = run_numpy(ps.programs[first + j], X)
        out[:, j] = vals
        if e != ERR_OK:
            rows = _rows_with_error(ps.programs[first + j], X)
            err[(err == 0) & rows] = e
    return out


def _rows_with_error(prog: Program, X: np.ndarray) -> np.ndarray:
    # per-row error mask; only reached on the failure path
    mask = np.zeros(X.shape[0], dtype=bool)
    for i in range(X.shape[0]):
        _, e, _ = run_numpy(prog, X[i : i + 1])
        mask[i] = e != ERR_OK
    return mask


def leapfrog_orbits(forces: ProgramSet, aset: ProgramSet, conserved: ProgramSet | None,
                    X0: np.ndarray, dt: float, nsteps: int, checks: np.ndarray, drift_stride: int,
                    nthreads: int = 1):
    n, r2 = X0.shape
    r = r2 // 2
    kc = len(conserved) if conserved is not None else 0
    X = X0.copy()
    err = np.zeros(n, dtype=np.int32)
    errstep = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    hdt = 0.5 * dt

    h0 = _eval_set(conserved, 0, kc, X, err) if kc else np.zeros((n, 0))
    drift = np.zeros((n, kc))
    ma = len(aset)
    av = _eval_set(aset, 0, ma, X, err)
    a0 = av.copy()
    acc = 0.5 * av
    checks = [int(c) for c in checks]
    icheck = np.zeros((n, ma, len(checks)))
    slot = {c: i for i, c in enumerate(checks)}
    f = _eval_set(forces, 0, r, X, err)
    xend = np.empty_like(X)
    with np.errstate(all="ignore"):
        for s in range(1, nsteps + 1):
            X[:, r:] = X[:, r:] - hdt * f
            v = _eval_set(forces, r, r, X, err)
            X[:, :r] = X[:, :r] + dt * v
            f = _eval_set(forces, 0, r, X, err)
            X[:, r:] = X[:, r:] - hdt * f
            bad = alive & (~np.isfinite(X).all(axis=1) | (err != 0))
            if bad.any():
                err[bad & (err == 0)] = ERR_NONFINITE
                errstep[bad] = s
                xend[bad] = X[bad]
                alive &= ~bad
            av = _eval_set(aset, 0, ma, X, err)
            if s in slot:
                c = slot[s]
                icheck[:, :, c] = np.where(alive[:, None], (acc + 0.5 * av) * dt, icheck[:, :, c])
            if s == nsteps:
                acc = np.where(alive[:, None], acc + 0.5 * av, acc)
            else:
                acc = np.where(alive[:, None], acc + av, acc)
            if kc and (s % drift_stride == 0 or s == nsteps):
                hv = _eval_set(conserved, 0, kc, X, err)
                dev = np.abs(hv - h0)
                upd = (dev > drift) | ~np.isfinite(dev)
                drift = np.where(upd & alive[:, None], dev, drift)
    ifull = acc * dt
    xend[alive] = X[alive]
    return a0, icheck, ifull, xend, drift, h0, err, errstep


def leapfrog_record(forces: ProgramSet, x0: np.ndarray, dt: float, nsteps: int):
    r2 = x0.shape[0]
    r = r2 // 2
    out = np.empty((nsteps + 1, r2))
    fq = [_scalar_program(p) for p in forces.programs[:r]]
    fp = [_scalar_program(p) for p in forces.programs[r:]]
    x = [float(v) for v in x0]
    out[0] = x
    hdt = 0.5 * dt
    e = 0

    def ev(progs):
        nonlocal e
        vals = []
        for run in progs:
            v, ee = run(x)
            if ee and not e:
                e = ee
            vals.append(v)
        return vals

    f = ev(fq)
    for s in range(1, nsteps + 1):
        for i in range(r):
            x[r + i] = x[r + i] - hdt * f[i]
        v = ev(fp)
        for i in range(r):
            x[i] = x[i] + dt * v[i]
        f = ev(fq)
        for i in range(r):
            x[r + i] = x[r + i] - hdt * f[i]
        out[s] = x
        if not e and not all(math.isfinite(c) for c in x):
            e = ERR_NONFINITE
        if e:
            return out[: s + 1], e, s
    return out, 0, -1


def _ipow_scalar(x: float, n: int) -> float:
    result = 1.0
    base = x
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


def _scalar_program(prog: Program):
    """Turn a program into a scalar closure using the math module."""
    code = prog.code.tolist()
    consts = prog.consts.tolist()
    ops = [(code[k], code[k + 1]) for k in range(0, len(code), 2)]

    def run(x) -> tuple[float, int]:
        stack = []
        err = 0
        for op, arg in ops:
            if op == 0:
                stack.append(consts[arg])
            elif op == 1:
                stack.append(x[arg])
            elif op == 7:
                stack[-1] = -stack[-1]
            elif op == 13:
                stack[-1] = _ipow_scalar(stack[-1], arg)
            elif op >= 8:
                a = stack[-1]
                try:
                    if op == 8:
                        stack[-1] = math.sin(a)
                    elif op == 9:
                        stack[-1] = math.cos(a)
                    elif op == 10:
                        stack[-1] = math.exp(a)
                    elif op == 11:
                        if a < 0:
                            return math.nan, 2
                        stack[-1] = math.sqrt(a)
                    elif op == 12:
                        if a <= 0:
                            return math.nan, 3
                        stack[-1] = math.log(a)
                except OverflowError:
                    stack[-1] = math.inf
                except ValueError:
                    stack[-1] = math.nan
            else:
                b = stack.pop()
                a = stack[-1]
                if op == 2:
                    stack[-1] = a + b
                elif op == 3:
                    stack[-1] = a - b
                elif op == 4:
                    stack[-1] = a * b
                elif op == 5:
                    if b == 0:
                        return math.nan, 1
                    stack[-1] = a / b
                elif op == 6:
                    if a < 0 and b != math.floor(b):
                        return math.nan, 4
                    if a == 0 and b < 0:
                        return math.nan, 1
                    try:
                        stack[-1] = math.pow(a, b)
                    except OverflowError:
                        stack[-1] = math.inf
        return stack[-1], err

    return run


def metropolis(hprog: Program, x: np.ndarray, hx: float, beta: float, scale: float,
               normals: np.ndarray, uniforms: np.ndarray, periodic: np.ndarray, thin: int,
               out: np.ndarray):
    run = _scalar_program(hprog)
    m, r2 = normals.shape
    cur = x.tolist()
    per = [bool(v) for v in periodic]
    twopi = 2.0 * math.pi
    nacc = nbad = nstore = 0
    cap = out.shape[0]
    nrm = normals.tolist()
    uni = uniforms.tolist()
    for j in range(m):
        row = nrm[j]
        y = [cur[i] + scale * row[i] for i in range(r2)]
        for i in range(r2):
            if per[i]:
                y[i] = y[i] - twopi * math.floor((y[i] + math.pi) / twopi)
        hy, e = run(y)
        if e or not math.isfinite(hy):
            nbad += 1
        else:
            u = uni[j]
            lu = math.log(u) if u > 0 else -math.inf
            if lu < -beta * (hy - hx):
                cur = y
                hx = hy
                nacc += 1
        if (j + 1) % thin == 0 and nstore < cap:
            out[nstore] = cur
            nstore += 1
    x[:] = cur
    return hx, nacc, nbad, nstore
