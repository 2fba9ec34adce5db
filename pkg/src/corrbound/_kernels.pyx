# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: bytecode evaluation, batched leapfrog, Metropolis chain.

Every routine mirrors a function in ``_fallback.py`` operation for operation,
so the two backends differ only by libm rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, sqrt, log, pow, floor, isfinite, fabs, M_PI
from cython.parallel cimport prange, threadid

cnp.import_array()

DEF MAX_STACK = 64

# opcodes, kept in sync with program.py
DEF OP_CONST = 0
DEF OP_VAR = 1
DEF OP_ADD = 2
DEF OP_SUB = 3
DEF OP_MUL = 4
DEF OP_DIV = 5
DEF OP_POW = 6
DEF OP_NEG = 7
DEF OP_SIN = 8
DEF OP_COS = 9
DEF OP_EXP = 10
DEF OP_SQRT = 11
DEF OP_LOG = 12
DEF OP_IPOW = 13

DEF ERR_DIV = 1
DEF ERR_SQRT = 2
DEF ERR_LOG = 3
DEF ERR_POW = 4
DEF ERR_NONFINITE = 10


cdef inline double _ipow(double x, int n) noexcept nogil:
    cdef double result = 1.0
    cdef double base = x
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


cdef double run(const int* code, int nops, const double* consts, const double* x,
                double* stack, int* err) noexcept nogil:
    cdef int sp = -1
    cdef int k, op, arg
    cdef double a, b
    for k in range(nops):
        op = code[2 * k]
        arg = code[2 * k + 1]
        if op == OP_CONST:
            sp += 1
            stack[sp] = consts[arg]
        elif op == OP_VAR:
            sp += 1
            stack[sp] = x[arg]
        elif op == OP_NEG:
            stack[sp] = -stack[sp]
        elif op == OP_IPOW:
            stack[sp] = _ipow(stack[sp], arg)
        elif op == OP_SIN:
            stack[sp] = sin(stack[sp])
        elif op == OP_COS:
            stack[sp] = cos(stack[sp])
        elif op == OP_EXP:
            stack[sp] = exp(stack[sp])
        elif op == OP_SQRT:
            if stack[sp] < 0 and err[0] == 0:
                err[0] = ERR_SQRT
            stack[sp] = sqrt(stack[sp])
        elif op == OP_LOG:
            if stack[sp] <= 0 and err[0] == 0:
                err[0] = ERR_LOG
            stack[sp] = log(stack[sp])
        else:
            sp -= 1
            a = stack[sp]
            b = stack[sp + 1]
            if op == OP_ADD:
                stack[sp] = a + b
            elif op == OP_SUB:
                stack[sp] = a - b
            elif op == OP_MUL:
                stack[sp] = a * b
            elif op == OP_DIV:
                if b == 0 and err[0] == 0:
                    err[0] = ERR_DIV
                stack[sp] = a / b
            elif op == OP_POW:
                if a < 0 and b != floor(b) and err[0] == 0:
                    err[0] = ERR_POW
                if a == 0 and b < 0 and err[0] == 0:
                    err[0] = ERR_DIV
                stack[sp] = pow(a, b)
    return stack[0]


def eval_batch(const int[::1] code, const double[::1] consts, const double[:, ::1] X,
               int nthreads=1):
    """Evaluate one program on every row of ``X``; returns (values, err, bad_row)."""
    cdef Py_ssize_t n = X.shape[0]
    cdef int nops = code.shape[0] // 2
    cdef double[::1] out = np.empty(n)
    cdef int[::1] errs = np.zeros(n, dtype=np.int32)
    cdef double[:, ::1] stacks = np.empty((max(nthreads, 1), MAX_STACK))
    cdef Py_ssize_t i
    cdef int tid
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        tid = threadid()
        out[i] = run(&code[0], nops, &consts[0], &X[i, 0], &stacks[tid, 0], &errs[i])
    cdef Py_ssize_t bad = -1
    cdef int err = 0
    for i in range(n):
        if errs[i] != 0:
            err = errs[i]
            bad = i
            break
    return np.asarray(out), err, bad


cdef inline void _eval_set(const int* code, const int* coff, const double* consts,
                           const int* kff, int first, int count, const double* x,
                           double* out, double* stack, int* err) noexcept nogil:
    cdef int j, pj
    for j in range(count):
        pj = first + j
        out[j] = run(&code[2 * coff[pj]], coff[pj + 1] - coff[pj], &consts[kff[pj]], x, stack, err)


def leapfrog_orbits(const int[::1] fcode, const int[::1] fcoff, const double[::1] fconsts,
                    const int[::1] fkoff,
                    const int[::1] acode, const int[::1] acoff, const double[::1] aconsts,
                    const int[::1] akoff,
                    const int[::1] hcode, const int[::1] hcoff, const double[::1] hconsts,
                    const int[::1] hkoff,
                    const double[:, ::1] X0, double dt, long nsteps, const long[::1] checks,
                    int drift_stride, int nthreads=1):
    """Kick-drift-kick leapfrog for a batch of trajectories.

    ``fcode`` packs dH/dq_1..dH/dq_r followed by dH/dp_1..dH/dp_r; ``acode``
    packs the observables. For each trajectory and observable returns the
    value at t=0, the trapezoid integrals over [0, c*dt] for every step c in
    the ascending ``checks`` array, and over [0, nsteps*dt]; per trajectory the final state and the maximum absolute
    deviation of every conserved-quantity program.
    """
    cdef Py_ssize_t n = X0.shape[0]
    cdef int r2 = X0.shape[1]
    cdef int r = r2 // 2
    cdef int kc = hcoff.shape[0] - 1
    cdef int ma = acoff.shape[0] - 1
    cdef int nc = checks.shape[0]
    cdef int nth = max(nthreads, 1)
    # scratch per thread: state(2r) force(r) vel(r) h0(kc) acc(ma) av(ma) stack
    cdef int width = r2 + 2 * r + kc + 2 * ma + MAX_STACK
    cdef double[:, ::1] scratch = np.empty((nth, width))
    cdef double[:, ::1] a0 = np.empty((n, ma))
    cdef double[:, :, ::1] icheck = np.zeros((n, ma, max(nc, 1)))
    cdef double[:, ::1] ifull = np.empty((n, ma))
    cdef double[:, ::1] xend = np.empty((n, r2))
    cdef double[:, ::1] drift = np.zeros((n, max(kc, 1)))
    cdef double[:, ::1] h0out = np.zeros((n, max(kc, 1)))
    cdef int[::1] errs = np.zeros(n, dtype=np.int32)
    cdef long[::1] errstep = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t t
    cdef int tid, i, j, e, c
    cdef long s
    cdef double *x
    cdef double *f
    cdef double *v
    cdef double *h0
    cdef double *acc
    cdef double *av
    cdef double *stk
    cdef double hv, dev, hdt
    hdt = 0.5 * dt
    for t in prange(n, nogil=True, num_threads=nth, schedule="dynamic"):
        tid = threadid()
        x = &scratch[tid, 0]
        f = x + r2
        v = f + r
        h0 = v + r
        acc = h0 + kc
        av = acc + ma
        stk = av + ma
        e = 0
        c = 0
        while c < nc and checks[c] < 1:
            c = c + 1
        for i in range(r2):
            x[i] = X0[t, i]
        if kc > 0:
            _eval_set(&hcode[0], &hcoff[0], &hconsts[0], &hkoff[0], 0, kc, x, h0, stk, &e)
            for j in range(kc):
                h0out[t, j] = h0[j]
        _eval_set(&acode[0], &acoff[0], &aconsts[0], &akoff[0], 0, ma, x, av, stk, &e)
        for j in range(ma):
            a0[t, j] = av[j]
            acc[j] = 0.5 * av[j]
        _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], 0, r, x, f, stk, &e)
        for s in range(1, nsteps + 1):
            for i in range(r):
                x[r + i] = x[r + i] - hdt * f[i]
            _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], r, r, x, v, stk, &e)
            for i in range(r):
                x[i] = x[i] + dt * v[i]
            _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], 0, r, x, f, stk, &e)
            for i in range(r):
                x[r + i] = x[r + i] - hdt * f[i]
            for i in range(r2):
                if not isfinite(x[i]):
                    if e == 0:
                        e = ERR_NONFINITE
            if e != 0:
                errs[t] = e
                errstep[t] = s
                break
            _eval_set(&acode[0], &acoff[0], &aconsts[0], &akoff[0], 0, ma, x, av, stk, &e)
            if c < nc and s == checks[c]:
                for j in range(ma):
                    icheck[t, j, c] = (acc[j] + 0.5 * av[j]) * dt
                c = c + 1
            for j in range(ma):
                if s == nsteps:
                    acc[j] = acc[j] + 0.5 * av[j]
                else:
                    acc[j] = acc[j] + av[j]
            if kc > 0 and (s % drift_stride == 0 or s == nsteps):
                for j in range(kc):
                    hv = run(&hcode[2 * hcoff[j]], hcoff[j + 1] - hcoff[j], &hconsts[hkoff[j]], x, stk, &e)
                    dev = fabs(hv - h0[j])
                    if dev > drift[t, j] or not isfinite(dev):
                        drift[t, j] = dev
        for j in range(ma):
            ifull[t, j] = acc[j] * dt
        for i in range(r2):
            xend[t, i] = x[i]
        if e != 0 and errs[t] == 0:
            errs[t] = e
    return (np.asarray(a0), np.asarray(icheck)[:, :, :nc], np.asarray(ifull), np.asarray(xend),
            np.asarray(drift)[:, :kc], np.asarray(h0out)[:, :kc], np.asarray(errs), np.asarray(errstep))


def leapfrog_record(const int[::1] fcode, const int[::1] fcoff, const double[::1] fconsts,
                    const int[::1] fkoff, const double[::1] x0, double dt, long nsteps):
    """Single trajectory with every state recorded; returns (states, err, err_step)."""
    cdef int r2 = x0.shape[0]
    cdef int r = r2 // 2
    cdef double[:, ::1] out = np.empty((nsteps + 1, r2))
    cdef double[::1] buf = np.empty(r2 + 2 * r + MAX_STACK)
    cdef double *x = &buf[0]
    cdef double *f = x + r2
    cdef double *v = f + r
    cdef double *stk = v + r
    cdef int i
    cdef int e = 0
    cdef long s
    cdef double hdt = 0.5 * dt
    with nogil:
        for i in range(r2):
            x[i] = x0[i]
            out[0, i] = x[i]
        _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], 0, r, x, f, stk, &e)
        for s in range(1, nsteps + 1):
            for i in range(r):
                x[r + i] = x[r + i] - hdt * f[i]
            _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], r, r, x, v, stk, &e)
            for i in range(r):
                x[i] = x[i] + dt * v[i]
            _eval_set(&fcode[0], &fcoff[0], &fconsts[0], &fkoff[0], 0, r, x, f, stk, &e)
            for i in range(r):
                x[r + i] = x[r + i] - hdt * f[i]
            for i in range(r2):
                out[s, i] = x[i]
                if not isfinite(x[i]) and e == 0:
                    e = ERR_NONFINITE
            if e != 0:
                break
    if e != 0:
        return np.asarray(out)[: s + 1], e, s
    return np.asarray(out), 0, -1


def metropolis(const int[::1] hcode, const double[::1] hconsts, double[::1] x,
               double hx, double beta, double scale,
               const double[:, ::1] normals, const double[::1] uniforms,
               const unsigned char[::1] periodic, int thin, double[:, ::1] out):
    """Random-walk Metropolis over a pre-drawn chunk of proposals.

    ``x`` is updated in place. Every ``thin``-th state is written to ``out``
    when ``out`` has rows. Returns (hx, n_accept, n_nonfinite, n_stored).
    """
    cdef Py_ssize_t m = normals.shape[0]
    cdef int r2 = x.shape[0]
    cdef int nops = hcode.shape[0] // 2
    cdef double[::1] buf = np.empty(r2 + MAX_STACK)
    cdef double *y = &buf[0]
    cdef double *stk = y + r2
    cdef Py_ssize_t j
    cdef int i, e
    cdef long nacc = 0, nbad = 0, nstore = 0
    cdef Py_ssize_t cap = out.shape[0]
    cdef double hy, twopi = 2.0 * M_PI
    with nogil:
        for j in range(m):
            for i in range(r2):
                y[i] = x[i] + scale * normals[j, i]
                if periodic[i]:
                    y[i] = y[i] - twopi * floor((y[i] + M_PI) / twopi)
            e = 0
            hy = run(&hcode[0], nops, &hconsts[0], y, stk, &e)
            if e != 0 or not isfinite(hy):
                nbad += 1
            elif log(uniforms[j]) < -beta * (hy - hx):
                for i in range(r2):
                    x[i] = y[i]
                hx = hy
                nacc += 1
            if (j + 1) % thin == 0 and nstore < cap:
                for i in range(r2):
                    out[nstore, i] = x[i]
                nstore += 1
    return hx, nacc, nbad, nstore
