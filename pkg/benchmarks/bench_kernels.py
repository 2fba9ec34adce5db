"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--traj 2000] [--steps 2000] [--threads 1]
"""
import argparse
import time

import numpy as np

from corrbound import backend as be
from corrbound.dynamics import builtin
from corrbound.gibbs import sample_gibbs
from corrbound.program import compile_expression, pack


def timed(fn, repeat=3):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--traj", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    be.set_threads(args.threads)
    names = be.available()
    if "compiled" not in names:
        print("compiled kernels not built; only the fallback is available")

    rows = []
    for sysname in ("oscillator", "pendulum"):
        sys = builtin(sysname)
        ens = sample_gibbs(sys, 1.0, args.traj, seed=1)
        obs = pack([compile_expression(sys.parse(a), sys.r) for a in ("p1", "q1^2", "H1^2")])
        X = ens.samples
        for name in names:
            b = be.get_backend(name)
            t_eval, _ = timed(lambda: b.eval_batch(sys.hamiltonian_program, X))
            t_orb, res = timed(lambda: b.leapfrog_orbits(sys.force_programs, obs, sys.conserved_programs, X, 0.02,
                                                         args.steps), repeat=1)
            t_mc, _ = timed(lambda: sample_gibbs(sys, 1.0, args.samples, burn_in=1000, proposal_scale=1.5, seed=2,
                                                 backend=b), repeat=1)
            rows.append((sysname, name, t_eval, t_orb, t_mc, float(res.integral_full.sum())))

    print(f"{'system':<11}{'backend':<10}{'eval (ms)':>11}{'orbits (s)':>12}{'metropolis (s)':>16}{'checksum':>22}")
    for s, n, te, to, tm, chk in rows:
        print(f"{s:<11}{n:<10}{te * 1e3:>11.2f}{to:>12.3f}{tm:>16.3f}{chk:>22.12g}")
    for s in ("oscillator", "pendulum"):
        r = {n: (to, tm) for ss, n, _, to, tm, _ in rows if ss == s}
        if "compiled" in r and "python" in r:
            print(f"{s}: orbit speed-up {r['python'][0] / r['compiled'][0]:.1f}x, "
                  f"metropolis speed-up {r['python'][1] / r['compiled'][1]:.1f}x")


if __name__ == "__main__":
    main()
