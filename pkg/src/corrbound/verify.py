"""Self-verification suites: oracle, property and cross-validation checks.

Each suite samples one ensemble, integrates one shared batch of
trajectories for all of its observables and evaluates numbered criteria:

1. oscillator saturation for A = q1²
2. the zero case A = q1
3. Ĉ + 3σ ≥ every reported bound
4. monotonicity of bounds in d
5. level-set quadrature norm vs Ĉ
6. partition refinement on the pendulum
7. agreement of the two C estimators
8. numerics hygiene (integrator order, sampler KS test, orthogonalization)
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import integrate as sint
from scipy import special, stats as sstats

from . import bounds as bd
from . import dynamics as dyn
from .backend import Backend
from .correlation import DIRECT, NORM, combined_stderr, estimates_from_batch, orbit_batch
from .gibbs import GibbsEnsemble, sample_gibbs
from .labeler import check_invariance, pendulum_labeler
from .regular import norm_AH_squared
from .report import SCHEMA_VERSION, BoundReport, compute_report, dumps, timestamp

SUITES = ("oscillator", "product", "pendulum")
DEFAULT_SEED = 2026
MONO_RTOL = 1e-12
ORTH_RTOL = 1e-8
ORTH_COND_MAX = 1e6
KS_ALPHA = 0.01


@dataclass(frozen=True)
class SuiteParams:
    system: str
    beta: float
    observables: tuple[str, ...]
    T: float
    dt: float
    n: int
    n_traj: int
    degrees: tuple[int, ...] = tuple(range(7))
    quadrature: tuple[str, ...] = ()
    labeled: bool = False


FULL = {
    "oscillator": SuiteParams("oscillator", 1.0, ("q1^2", "q1", "H1^2"), 200 * math.pi, 0.05, 100_000, 20_000,
                              quadrature=("q1^2", "H1^2")),
    "product": SuiteParams("product", 1.0, ("q1^2", "q1^2*q2^2", "H1^2"), 500.0, 0.05, 100_000, 20_000,
                           quadrature=("q1^2", "q1^2*q2^2", "H1^2")),
    "pendulum": SuiteParams("pendulum", 1.0, ("p1",), 500.0, 0.02, 100_000, 20_000, labeled=True),
}

QUICK = {
    name: SuiteParams(p.system, p.beta, p.observables, p.T / 5, p.dt, 20_000, 2_000, p.degrees, p.quadrature,
                      p.labeled)
    for name, p in FULL.items()
}
SCALES = {"full": FULL, "quick": QUICK}

# Gibbs moments of the exact level-set averages, from Gamma integrals:
# HO: A^H(q1²) = E, A^H(H²) = E², E ~ Gamma(1); product: E1, E2 ~ Gamma(1) independent,
# A^H(q1²) = E1, A^H(q1²q2²) = E1·E2/2, A^H(H²) = (E1 + E2)² with E1 + E2 ~ Gamma(2).
QUADRATURE_ORACLES = {
    ("oscillator", "q1^2"): lambda b: 2.0 / b**2,
    ("oscillator", "H1^2"): lambda b: 24.0 / b**4,
    ("product", "q1^2"): lambda b: 2.0 / b**2,
    ("product", "q1^2*q2^2"): lambda b: 1.0 / b**4,
    ("product", "H1^2"): lambda b: 120.0 / b**4,
}


def pendulum_C_oracle(beta: float = 1.0) -> float:
    """C(p1) for the pendulum p²/2 - cos q from the rotation period.

    Librating orbits average p to zero; a rotating orbit at energy E > 1 has
    |p̄| = 2π/T(E) with T(E) = 4K(2/(E+1))/√(2(E+1)). The Gibbs measure of a
    thin shell is T(E) e^{-βE} dE / Z per direction.
    """
    def period(E):
        return 4.0 * special.ellipk(2.0 / (E + 1.0)) / math.sqrt(2.0 * (E + 1.0))

    num = 2.0 * sint.quad(lambda E: 4 * math.pi**2 / period(E) * math.exp(-beta * E), 1.0, 1.0 + 60.0 / beta,
                          limit=200)[0]
    Z = 2 * math.pi * special.i0(beta) * math.sqrt(2 * math.pi / beta)
    return num / Z


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    measured: Any
    tolerance: str
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] C{self.criterion} {self.name}: {self.detail or self.measured}"


@dataclass
class SuiteResult:
    suite: str
    params: dict
    checks: list[Check]
    warnings: list[str] = field(default_factory=list)
    seconds: float = 0.0
    reports: list[BoundReport] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def by_criterion(self) -> dict[int, list[Check]]:
        out: dict[int, list[Check]] = {}
        for c in self.checks:
            out.setdefault(c.criterion, []).append(c)
        return out

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed, "params": self.params, "seconds": self.seconds,
                "checks": [asdict(c) for c in self.checks], "warnings": self.warnings}


def verification_document(results: Sequence[SuiteResult], include_timing: bool = False) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "timestamp": timestamp(),
           "passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    if not include_timing:
        for s in doc["suites"]:
            s.pop("seconds")
    return dumps(doc)


# ------------------------------------------------------------------ individual checks


def _within_rel(x: float, ref: float, rel: float) -> bool:
    return abs(x - ref) <= rel * abs(ref)


def check_main_inequality(rep: BoundReport) -> list[Check]:
    """Ĉ + 3σ ≥ bound for every estimator and every reported bound."""
    bounds = [(f"bound_{b['d']}", b) for b in rep.bounds]
    if rep.mazur_strict:
        bounds.append(("mazur_strict", rep.mazur_strict))
    for gram, seq in rep.partitioned.items():
        bounds += [(f"partitioned[{gram}]_{p['d']}", p) for p in seq]
    worst, n_viol, n = math.inf, 0, 0
    where = ""
    for e in rep.estimates:
        for label, b in bounds:
            sigma = math.hypot(e["total_error"], b["stderr"] or 0.0)
            n += 1
            if e["value"] + 3 * sigma < b["value"]:
                n_viol += 1
            z = (e["value"] - b["value"]) / sigma if sigma > 0 else math.copysign(math.inf, e["value"] - b["value"])
            if z < worst:
                worst, where = z, f"{e['method']} vs {label}"
    return [Check(3, f"{rep.system}/{rep.observable}: C + 3 sigma >= bounds", n_viol == 0,
                  {"violations": n_viol, "comparisons": n, "tightest_z": worst, "at": where},
                  "zero violations", f"{n_viol}/{n} violations; tightest (C - bound)/sigma = {worst:.2f} ({where})")]


def _monotone(values: Sequence[float]) -> tuple[bool, float]:
    worst = 0.0
    for a, b in zip(values, values[1:]):
        worst = max(worst, (a - b) / max(abs(a), 1e-300))
    return worst <= MONO_RTOL, worst


def check_monotone(rep: BoundReport) -> list[Check]:
    seqs = {"bound": [b["value"] for b in rep.bounds]}
    for gram, seq in rep.partitioned.items():
        seqs[f"partitioned[{gram}]"] = [p["value"] for p in seq]
    out = []
    for label, vals in seqs.items():
        ok, worst = _monotone(vals)
        out.append(Check(4, f"{rep.system}/{rep.observable}: {label}_d non-decreasing", ok,
                         {"values": vals, "max_relative_drop": worst}, f"drop <= {MONO_RTOL:g} relative",
                         f"max relative drop {worst:.2e}"))
    return out


def check_estimators_agree(rep: BoundReport) -> list[Check]:
    a, b = rep.estimate(NORM), rep.estimate(DIRECT)
    comb = math.hypot(a["total_error"], b["total_error"])
    diff = abs(a["value"] - b["value"])
    ok = diff <= 3 * comb or (comb == 0.0 and diff <= 1e-12 * max(1.0, abs(a["value"])))
    return [Check(7, f"{rep.system}/{rep.observable}: norm vs direct", ok,
                  {"norm": a["value"], "direct": b["value"], "combined_stderr": comb},
                  "|difference| <= 3 x combined stderr",
                  f"{a['value']:.5g} vs {b['value']:.5g}, |diff| = {diff:.2g} vs 3 sigma = {3 * comb:.2g}")]


def check_quadrature(sys: dyn.SystemSpec, rep: BoundReport, A: str, beta: float) -> list[Check]:
    q = norm_AH_squared(sys, A, beta)
    est = rep.estimate(NORM)
    sigma = est["total_error"]
    out = [Check(5, f"{sys.name}/{A}: |norm(A^H)^2 - C| <= 3 sigma", abs(q - est["value"]) <= 3 * sigma,
                 {"quadrature": q, "C": est["value"], "sigma_total": sigma}, "3 sigma_total",
                 f"quadrature {q:.6g} vs C {est['value']:.6g} +/- {sigma:.2g}")]
    oracle = QUADRATURE_ORACLES.get((sys.name, A))
    if oracle is not None:
        ref = oracle(beta)
        out.append(Check(5, f"{sys.name}/{A}: quadrature vs closed form", _within_rel(q, ref, 1e-3),
                         {"quadrature": q, "oracle": ref}, "1e-3 relative",
                         f"{q:.7g} vs {ref:.7g} (rel {abs(q - ref) / abs(ref):.1e})"))
    return out


def check_oscillator_saturation(rep: BoundReport, beta: float) -> list[Check]:
    target = 2.0 / beta**2
    vals = {"norm": rep.estimate(NORM)["value"], "direct": rep.estimate(DIRECT)["value"],
            "bound_1": rep.bound(1)["value"]}
    out = [Check(1, f"oscillator/q1^2: {k} within 5% of {target:g}", _within_rel(v, target, 0.05), v, "5% relative",
                 f"{v:.5g} (rel {abs(v - target) / target:.2%})") for k, v in vals.items()]
    b1 = vals["bound_1"]
    for d in (2, 3):
        v = rep.bound(d)["value"]
        out.append(Check(1, f"oscillator/q1^2: bound_{d} within 2% of bound_1", _within_rel(v, b1, 0.02), v,
                         "2% relative", f"{v:.6g} vs {b1:.6g} (rel {abs(v - b1) / abs(b1):.2e})"))
    return out


def check_zero_case(rep: BoundReport) -> list[Check]:
    out = []
    for e in rep.estimates:
        out.append(Check(2, f"oscillator/q1: |C[{e['method']}]| < 1e-3", abs(e["value"]) < 1e-3, e["value"], "1e-3",
                         f"{e['value']:.3g}"))
    for b in rep.bounds:
        if b["d"] <= 3:
            out.append(Check(2, f"oscillator/q1: bound_{b['d']} < 1e-3", b["value"] < 1e-3, b["value"], "1e-3",
                             f"{b['value']:.3g}"))
    return out


def check_partition(rep: BoundReport, d_top: int = 6) -> list[Check]:
    C = rep.estimate(NORM)["value"]
    out = []
    for b in rep.bounds:
        se = b["stderr"]
        out.append(Check(6, f"pendulum/p1: unpartitioned bound_{b['d']} within 3 sigma of 0", b["value"] < 3 * se,
                         {"value": b["value"], "stderr": se}, "< 3 sigma", f"{b['value']:.3g} vs 3 sigma = {3 * se:.3g}"))
    cell = {p["d"]: p for p in rep.partitioned["cell"]}
    top = cell[d_top]
    out.append(Check(6, f"pendulum/p1: partitioned bound_{d_top} > 0", top["value"] > 0, top["value"], "> 0",
                     f"{top['value']:.5g}"))
    out.append(Check(6, f"pendulum/p1: partitioned bound_{d_top} >= 0.8 C", top["value"] >= 0.8 * C,
                     {"partitioned": top["value"], "C": C}, ">= 0.8 C",
                     f"{top['value']:.5g} vs 0.8 x {C:.5g} = {0.8 * C:.5g} (ratio {top['value'] / C:.3f})"))
    worst = math.inf
    for b in rep.bounds:
        p = cell[b["d"]]
        sigma = math.hypot(p["stderr"], b["stderr"])
        worst = min(worst, (p["value"] - b["value"] + 3 * sigma) / max(sigma, 1e-300))
    out.append(Check(6, "pendulum/p1: partitioned >= unpartitioned - 3 sigma at every d", worst >= 0,
                     {"tightest_margin_sigma": worst}, ">= -3 sigma",
                     f"tightest (partitioned - unpartitioned)/sigma = {worst - 3:.2f}"))
    oracle = pendulum_C_oracle(rep.beta)
    est = rep.estimate(NORM)
    out.append(Check(6, "pendulum/p1: C vs rotation-period oracle", abs(est["value"] - oracle) <= 3 * est["total_error"],
                     {"C": est["value"], "oracle": oracle, "sigma": est["total_error"]}, "3 sigma",
                     f"{est['value']:.5g} vs {oracle:.5g} +/- {est['total_error']:.2g}"))
    return out


def check_integrator_order(dts: Sequence[float] = (1e-2, 5e-3, 2.5e-3)) -> list[Check]:
    """Per-period energy error on the unit oscillator from (1, 0) at halving steps."""
    sys = dyn.harmonic_oscillator()
    errs = [float(dyn.integrate(sys, dyn.PhaseState((1.0,), (0.0,)), 2 * math.pi, dt).drift[0]) for dt in dts]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    ok = all(3.0 <= r <= 5.0 for r in ratios)
    return [Check(8, "leapfrog second-order convergence on the oscillator", ok, {"errors": errs, "ratios": ratios},
                  "ratios in [3, 5]", "energy-error ratios " + ", ".join(f"{r:.3f}" for r in ratios))]


def check_energy_ks(ens: GibbsEnsemble, sys: dyn.SystemSpec) -> list[Check]:
    """KS test of sampled H against Gamma(r, 1/β), thinned to about ESS(H) samples."""
    H = sys.evaluate(sys.hamiltonian, ens.samples)
    ess = ens.ess.get("H") or len(H)
    stride = max(1, math.ceil(len(H) / ess))
    sub = H[::stride]
    res = sstats.kstest(sub, sstats.gamma(a=sys.r, scale=1.0 / ens.beta).cdf)
    return [Check(8, "Gibbs energy distribution (KS)", res.pvalue >= KS_ALPHA,
                  {"statistic": float(res.statistic), "pvalue": float(res.pvalue), "n": len(sub), "stride": stride},
                  f"p >= {KS_ALPHA}", f"D = {res.statistic:.4f}, p = {res.pvalue:.3f}, n = {len(sub)}")]


def check_orthogonalization(ens: GibbsEnsemble, sys: dyn.SystemSpec, A: str, degrees: Sequence[int]) -> list[Check]:
    out = []
    dmax = max(degrees)
    for standardize in (False, True):
        od = bd.build_overlaps(ens, sys, A, bd.enumerate_basis(sys.k, dmax), standardize=standardize)
        worst, used = 0.0, []
        for d in degrees:
            G, _ = od.block(d)
            if bd.condition_number(G) >= ORTH_COND_MAX:
                continue
            raw = bd.polynomial_bound(od, d).value
            orth = bd.polynomial_bound(bd.orthogonalize(od, d), d).value
            worst = max(worst, abs(raw - orth) / max(abs(raw), 1e-300))
            used.append(d)
        label = "standardized" if standardize else "raw"
        out.append(Check(8, f"{sys.name}/{A}: orthogonalized vs {label} monomials", bool(used) and worst <= ORTH_RTOL,
                         {"max_relative_difference": worst, "degrees": used}, f"{ORTH_RTOL:g} relative where cond < 1e6",
                         f"max rel diff {worst:.1e} over d = {used}"))
    return out


def check_labeler_invariance(ens: GibbsEnsemble, sys: dyn.SystemSpec, T: float, dt: float, n: int = 2000) -> list[Check]:
    lab = pendulum_labeler(sys)
    inv = check_invariance(lab, ens.subsample(n).samples, T, dt)
    return [Check(6, "pendulum labeler flow invariance", inv.fraction_changed <= 1e-2,
                  {"changed": inv.n_changed, "n": inv.n_trajectories}, "<= 1% of trajectories change cell",
                  f"{inv.n_changed}/{inv.n_trajectories} trajectories changed cell")]


# ------------------------------------------------------------------ suites


def run_suite(name: str, scale: str = "full", seed: int = DEFAULT_SEED, backend: Backend | None = None,
              n_resamples: int = bd.DEFAULT_RESAMPLES, progress: Callable[[str], None] | None = None) -> SuiteResult:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; valid suites: {', '.join(SUITES + ('all',))}")
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; valid scales: {', '.join(SCALES)}")
    say = progress or (lambda msg: None)
    p = SCALES[scale][name]
    t0 = time.perf_counter()
    sys = dyn.builtin(p.system)
    say(f"{name}: sampling {p.n} Gibbs points")
    ens = sample_gibbs(sys, p.beta, p.n, seed=seed, backend=backend)
    say(f"{name}: integrating {p.n_traj} trajectories to T = {p.T:g}")
    batch = orbit_batch(sys, list(p.observables), ens, p.T, p.dt, p.n_traj, backend=backend)
    labeler = pendulum_labeler(sys) if p.labeled else None
    checks: list[Check] = []
    reports = []
    warnings = list(ens.warnings) + list(batch.warnings)
    for j, A in enumerate(p.observables):
        say(f"{name}: bounds for {A}")
        rep, _ = compute_report(sys, ens, A, p.degrees, p.T, p.dt, n_traj=p.n_traj, labeler=labeler, seed=seed,
                                batch=batch, batch_index=j, n_resamples=n_resamples, backend=backend)
        reports.append(rep)
        warnings += rep.warnings
        checks += check_main_inequality(rep)
        checks += check_monotone(rep)
        checks += check_estimators_agree(rep)
        if A in p.quadrature:
            say(f"{name}: level-set quadrature for {A}")
            checks += check_quadrature(sys, rep, A, p.beta)
        if name == "oscillator" and A == "q1^2":
            checks += check_oscillator_saturation(rep, p.beta)
        if name == "oscillator" and A == "q1":
            checks += check_zero_case(rep)
        if name == "pendulum":
            checks += check_partition(rep, max(p.degrees))
    if name == "oscillator":
        checks += check_integrator_order()
        checks += check_energy_ks(ens, sys)
        checks += check_orthogonalization(ens, sys, "q1^2", p.degrees)
    if name == "pendulum":
        checks += check_labeler_invariance(ens, sys, p.T, p.dt)
    checks.sort(key=lambda c: c.criterion)
    params = {**asdict(p), "seed": seed, "scale": scale}
    return SuiteResult(name, params, checks, list(dict.fromkeys(warnings)), time.perf_counter() - t0, reports)


def run(names: str | Sequence[str] = "all", **kw) -> list[SuiteResult]:
    if isinstance(names, str):
        names = SUITES if names == "all" else (names,)
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; valid suites: {', '.join(SUITES + ('all',))}")
    return [run_suite(n, **kw) for n in names]
