"""Metropolis sampling of the normalised Gibbs measure exp(-βH) dq dp / Z(β)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import expr as ex
from . import stats
from .backend import Backend, get_backend
from .dynamics import SystemSpec

log = logging.getLogger(__name__)

DEFAULT_BURN_IN = 10_000
DEFAULT_THIN = 10
TARGET_ACCEPT = (0.30, 0.40)
WARN_ACCEPT = (0.1, 0.7)
_CHUNK = 65_536
ENSEMBLE_FORMAT = "corrbound-ensemble/1"


class SamplingError(RuntimeError):
    pass


@dataclass
class GibbsEnsemble:
    beta: float
    samples: np.ndarray  # (n, 2r): q1..qr, p1..pr
    acceptance_rate: float
    ess: dict[str, float]
    seed: int
    system_name: str
    proposal_scale: float
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    n_nonfinite: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] == 0 or self.samples.shape[1] % 2:
            raise ValueError("samples must be a non-empty (n, 2r) array")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples must be finite")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def r(self) -> int:
        return self.samples.shape[1] // 2

    @property
    def q(self) -> np.ndarray:
        return self.samples[:, : self.r]

    @property
    def p(self) -> np.ndarray:
        return self.samples[:, self.r :]

    def subsample(self, m: int | None) -> "GibbsEnsemble":
        """Evenly strided subset of at most ``m`` samples."""
        if m is None or m >= self.n:
            return self
        idx = np.linspace(0, self.n - 1, m).round().astype(int)
        return GibbsEnsemble(self.beta, self.samples[idx], self.acceptance_rate, dict(self.ess), self.seed,
                             self.system_name, self.proposal_scale, self.burn_in, self.thin, self.n_nonfinite,
                             list(self.warnings))

    def column_names(self) -> list[str]:
        return [f"q{i}" for i in range(1, self.r + 1)] + [f"p{i}" for i in range(1, self.r + 1)]


def _chain(sys: SystemSpec, beta: float, x: np.ndarray, hx: float, scale: float, steps: int, thin: int,
           rng: np.random.Generator, out: np.ndarray | None, backend: Backend):
    periodic = np.array(list(sys.periodic) + [False] * sys.r, dtype=np.uint8)
    prog = sys.hamiltonian_program
    nacc = nbad = stored = 0
    done = 0
    empty = np.empty((0, 2 * sys.r))
    while done < steps:
        m = min(_CHUNK * thin, steps - done)
        normals = rng.standard_normal((m, 2 * sys.r))
        uniforms = rng.random(m)
        target = out[stored:] if out is not None else empty
        hx, a, b, s = backend.metropolis(prog, x, hx, beta, scale, normals, uniforms, periodic, thin, target)
        nacc += a
        nbad += b
        stored += s
        done += m
    return hx, nacc, nbad, stored


def tune_proposal(sys: SystemSpec, beta: float, seed: int = 0, steps: int = 4000, max_rounds: int = 30,
                  backend: Backend | None = None) -> float:
    """Pilot runs adjusting the Gaussian proposal width towards 30-40% acceptance."""
    backend = backend or get_backend()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    x = _start(sys)
    hx = float(backend.eval_batch(sys.hamiltonian_program, x[None, :])[0])
    scale = 1.0 / math.sqrt(beta)
    lo, hi = TARGET_ACCEPT
    for _ in range(max_rounds):
        hx, nacc, _, _ = _chain(sys, beta, x, hx, scale, steps, 1, rng, None, backend)
        acc = nacc / steps
        if lo <= acc <= hi:
            break
        scale *= math.exp(2.0 * (acc - 0.35))
    return scale


def _start(sys: SystemSpec) -> np.ndarray:
    return np.zeros(2 * sys.r)


def sample_gibbs(sys: SystemSpec, beta: float, n: int, burn_in: int = DEFAULT_BURN_IN, thin: int = DEFAULT_THIN,
                 proposal_scale: float | None = None, seed: int = 0, backend: Backend | None = None) -> GibbsEnsemble:
    """Random-walk Metropolis chain targeting exp(-βH(q, p)).

    Parameters
    ----------
    n : int
        Number of retained samples after burn-in and thinning.
    proposal_scale : float, optional
        Isotropic Gaussian step width on (q, p). Tuned by pilot runs when omitted.
    seed : int
        The chain is a deterministic function of all arguments.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if n < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need n >= 1, thin >= 1, burn_in >= 0")
    backend = backend or get_backend()
    if proposal_scale is None:
        proposal_scale = tune_proposal(sys, beta, seed, backend=backend)
    if not proposal_scale > 0:
        raise ValueError("proposal_scale must be > 0")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6155]))
    x = _start(sys)
    hx = float(backend.eval_batch(sys.hamiltonian_program, x[None, :])[0])
    if not math.isfinite(hx):
        raise SamplingError("Hamiltonian is not finite at the starting point")
    hx, _, bad_burn, _ = _chain(sys, beta, x, hx, proposal_scale, burn_in, 1, rng, None, backend)

    out = np.empty((n, 2 * sys.r))
    steps = n * thin
    hx, nacc, nbad, stored = _chain(sys, beta, x, hx, proposal_scale, steps, thin, rng, out, backend)
    assert stored == n
    acc = nacc / steps
    warnings = []
    if not WARN_ACCEPT[0] <= acc <= WARN_ACCEPT[1]:
        warnings.append(
            f"acceptance rate {acc:.3f} outside [{WARN_ACCEPT[0]}, {WARN_ACCEPT[1]}]; "
            f"{'decrease' if acc < WARN_ACCEPT[0] else 'increase'} proposal_scale (now {proposal_scale:.4g})"
        )
    if nbad + bad_burn:
        warnings.append(f"{nbad + bad_burn} proposals rejected for non-finite H")
    for w in warnings:
        log.warning(w)

    ens = GibbsEnsemble(beta=beta, samples=out, acceptance_rate=acc, ess={}, seed=seed, system_name=sys.name,
                        proposal_scale=proposal_scale, burn_in=burn_in, thin=thin, n_nonfinite=nbad + bad_burn,
                        warnings=warnings)
    ens.ess = ensemble_ess(ens, sys, backend)
    return ens


def ensemble_ess(ens: GibbsEnsemble, sys: SystemSpec | None = None, backend: Backend | None = None) -> dict[str, float]:
    out = {name: stats.effective_sample_size(ens.samples[:, j]) for j, name in enumerate(ens.column_names())}
    if sys is not None:
        out["H"] = stats.effective_sample_size(sys.evaluate(sys.hamiltonian, ens.samples, backend))
    return out


Observable = ex.Expression | str | Callable[[np.ndarray], np.ndarray] | np.ndarray


def observable_values(ens: GibbsEnsemble, f: Observable, sys: SystemSpec | None = None,
                      backend: Backend | None = None) -> np.ndarray:
    if isinstance(f, np.ndarray):
        vals = np.asarray(f, dtype=np.float64)
        if vals.shape != (ens.n,):
            raise ValueError("value array must have one entry per sample")
    elif isinstance(f, str):
        e = sys.parse(f) if sys is not None else ex.parse(f, ens.r)
        vals = ex.evaluate_many(e, ens.samples, backend)
    elif isinstance(f, ex.Expression):
        vals = ex.evaluate_many(f, ens.samples, backend)
    else:
        vals = np.asarray(f(ens.samples), dtype=np.float64)
        if vals.shape == ():
            vals = np.full(ens.n, float(vals))
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise SamplingError(f"observable is not finite at sample index {int(bad[0])}")
    return vals


def expectation(ens: GibbsEnsemble, f: Observable, sys: SystemSpec | None = None,
                backend: Backend | None = None) -> tuple[float, float]:
    """Gibbs expectation <f>_β as (mean, batch-means standard error)."""
    return stats.batch_means(observable_values(ens, f, sys, backend))


# ------------------------------------------------------------------ persistence


def save_ensemble(ens: GibbsEnsemble, path: str | Path) -> Path:
    """Write ``.csv`` (commented header + columns q.., p..) or ``.npz``."""
    path = Path(path)
    meta = {
        "format": ENSEMBLE_FORMAT,
        "system": ens.system_name,
        "beta": repr(float(ens.beta)),
        "seed": str(ens.seed),
        "r": str(ens.r),
        "n": str(ens.n),
        "burn_in": str(ens.burn_in),
        "thin": str(ens.thin),
        "proposal_scale": repr(float(ens.proposal_scale)),
        "acceptance_rate": repr(float(ens.acceptance_rate)),
        "n_nonfinite": str(ens.n_nonfinite),
    }
    if path.suffix == ".npz":
        with open(path, "wb") as fh:
            np.savez(fh, samples=ens.samples, meta=np.array([f"{k}={v}" for k, v in meta.items()]),
                     warnings=np.array(ens.warnings, dtype=str))
        return path
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines += [f"# warning={w}" for w in ens.warnings]
    lines.append(",".join(ens.column_names()))
    lines += [",".join(repr(float(v)) for v in row) for row in ens.samples]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_ensemble(path: str | Path, sys: SystemSpec | None = None) -> GibbsEnsemble:
    path = Path(path)
    meta: dict[str, str] = {}
    warnings: list[str] = []
    if path.suffix == ".npz":
        with np.load(path) as data:
            samples = data["samples"]
            for item in data["meta"]:
                k, _, v = str(item).partition("=")
                meta[k] = v
            warnings = [str(w) for w in data["warnings"]]
    else:
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    if k == "warning":
                        warnings.append(v)
                    else:
                        meta[k] = v
                elif line and not line[0].isalpha():
                    rows.append([float(v) for v in line.split(",")])
        samples = np.array(rows, dtype=np.float64)
    if meta.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{path}: not a {ENSEMBLE_FORMAT} file")
    ens = GibbsEnsemble(
        beta=float(meta["beta"]), samples=samples.reshape(-1, 2 * int(meta["r"])),
        acceptance_rate=float(meta["acceptance_rate"]), ess={}, seed=int(meta["seed"]),
        system_name=meta["system"], proposal_scale=float(meta["proposal_scale"]), burn_in=int(meta["burn_in"]),
        thin=int(meta["thin"]), n_nonfinite=int(meta.get("n_nonfinite", 0)), warnings=warnings,
    )
    ens.ess = ensemble_ess(ens, sys)
    return ens
