"""End-to-end bound pipeline and its serializable report."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bounds as bd
from . import expr as ex
from .backend import Backend
from .correlation import CEstimate, OrbitBatch, estimates_from_batch, orbit_batch
from .dynamics import SystemSpec
from .gibbs import GibbsEnsemble
from .labeler import InvariantLabeler

SCHEMA_VERSION = "1.0"


def timestamp() -> str:
    """UTC time in ISO format; honours SOURCE_DATE_EPOCH for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return t.replace(microsecond=0).isoformat()


def jsonable(x: Any) -> Any:
    """Recursively convert numpy types and non-finite floats (to None) for strict JSON."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def estimate_dict(e: CEstimate) -> dict:
    return {"method": e.method, "value": e.value, "stderr": e.stderr, "systematic": e.systematic,
            "total_error": e.total_error, "T": e.T, "dt": e.dt, "n": e.n_ensemble, "observable": e.observable,
            "bias_note": dict(e.bias_note), "warnings": list(e.warnings)}


@dataclass
class BoundReport:
    system: str
    beta: float
    observable: str
    n_samples: int
    seed: int
    T: float
    dt: float
    n_traj: int
    standardized: bool
    estimates: list[dict]
    bounds: list[dict]
    mazur_strict: dict | None = None
    saturation: dict | None = None
    partitioned: dict[str, list[dict]] = field(default_factory=dict)
    cells: dict | None = None
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION
    timestamp: str = ""

    def estimate(self, method: str) -> dict:
        for e in self.estimates:
            if e["method"] == method:
                return e
        raise KeyError(method)

    def bound(self, d: int) -> dict:
        for b in self.bounds:
            if b["d"] == d:
                return b
        raise KeyError(d)

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self, path: str | Path | None = None) -> str:
        text = dumps(asdict(self))
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "BoundReport":
        data = json.loads(Path(path).read_text())
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
        return cls(**data)

    def rows(self) -> list[dict]:
        """Flat projection: one row per estimate and per bound."""
        rows = []
        for e in self.estimates:
            rows.append({"kind": "estimate", "name": e["method"], "d": "", "value": e["value"],
                         "stderr": e["total_error"], "cond": "", "jitter": ""})
        for b in self.bounds:
            rows.append({"kind": "bound", "name": f"bound_{b['d']}", "d": b["d"], "value": b["value"],
                         "stderr": b["stderr"], "cond": b["cond"], "jitter": b["jitter"]})
        if self.mazur_strict:
            m = self.mazur_strict
            rows.append({"kind": "bound", "name": "mazur_strict", "d": 1, "value": m["value"], "stderr": m["stderr"],
                         "cond": m["cond"], "jitter": m["jitter"]})
        for gram, seq in sorted(self.partitioned.items()):
            for p in seq:
                rows.append({"kind": f"partitioned_{gram}", "name": f"partitioned_{p['d']}", "d": p["d"],
                             "value": p["value"], "stderr": p["stderr"], "cond": "", "jitter": max(p["jitter"] or [0])})
        for r in rows:
            r["observable"] = self.observable
        return rows

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["observable", "kind", "name", "d", "value", "stderr", "cond", "jitter"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path

    def summary(self) -> str:
        lines = [f"{self.system}  beta={self.beta:g}  A={self.observable}  n={self.n_samples}  T={self.T:g}"]
        for e in self.estimates:
            lines.append(f"  C[{e['method']}] = {e['value']:.6g} +/- {e['total_error']:.2g}")
        for b in self.bounds:
            lines.append(f"  bound_{b['d']} = {b['value']:.6g} +/- {_fmt(b['stderr'])}  cond={_fmt(b['cond'])}")
        if self.mazur_strict:
            lines.append(f"  mazur_strict = {self.mazur_strict['value']:.6g}")
        for gram, seq in sorted(self.partitioned.items()):
            for p in seq:
                lines.append(f"  partitioned[{gram}]_{p['d']} = {p['value']:.6g} +/- {_fmt(p['stderr'])}")
        if self.saturation:
            lines.append(f"  saturation: {self.saturation['verdict']} ({self.saturation['message']})")
        for w in self.warnings:
            lines.append(f"  warning: {w}")
        return "\n".join(lines)


def _fmt(x) -> str:
    return "n/a" if x is None or (isinstance(x, float) and not math.isfinite(x)) else f"{x:.2g}"


def export_overlaps(od: bd.OverlapData, path: str | Path) -> Path:
    """Gram matrix and overlaps, one row per basis monomial."""
    path = Path(path)
    names = [str(m) for m in od.basis]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "overlap", "overlap_stderr"] + [f"G[{n}]" for n in names])
        for i, n in enumerate(names):
            w.writerow([n, repr(float(od.overlaps[i])), repr(float(od.overlaps_stderr[i]))]
                       + [repr(float(g)) for g in od.gram[i]])
    return path


def _unique(items: Sequence[str]) -> list[str]:
    return list(dict.fromkeys(items))


def compute_report(sys: SystemSpec, ens: GibbsEnsemble, A: str | ex.Expression, degrees: Sequence[int], T: float,
                   dt: float, n_traj: int | None = None, d_probe: int | None = None,
                   saturation_degree: int | None = None, labeler: InvariantLabeler | None = None,
                   standardize: bool = True, n_resamples: int = bd.DEFAULT_RESAMPLES, jitter: float | None = None,
                   seed: int = 0, batch: OrbitBatch | None = None, batch_index: int = 0,
                   partition_grams: Sequence[str] = bd.GRAM_MODES, backend: Backend | None = None,
                   config: dict | None = None, basis_cap: int | None = bd.DEFAULT_BASIS_CAP,
                   max_degree: int | None = bd.DEFAULT_MAX_DEGREE) -> tuple[BoundReport, bd.OverlapData]:
    """Estimate C(A) both ways, compute the bound sequence and diagnostics.

    ``batch`` lets several observables share one set of trajectories. Returns
    the report and the overlap data behind it.
    """
    Aexpr = sys.parse(A) if isinstance(A, str) else A
    degrees = sorted(set(int(d) for d in degrees))
    if not degrees or degrees[0] < 0:
        raise ValueError("degrees must be a non-empty list of non-negative integers")
    if d_probe is None:
        # one degree above the top, unless that would break the caps
        d_probe = degrees[-1] + 1
        if (max_degree is not None and d_probe > max_degree) or (
                basis_cap is not None and bd.basis_size(sys.k, d_probe) > basis_cap):
            d_probe = degrees[-1]
    d_probe = int(d_probe)
    if saturation_degree is None:
        below = [d for d in degrees if d < d_probe]
        saturation_degree = below[-1] if below else None

    if batch is None:
        batch = orbit_batch(sys, [Aexpr], ens, T, dt, n_traj, backend=backend)
        batch_index = 0
    norm, direct = estimates_from_batch(batch, batch_index)
    warnings = list(ens.warnings) + norm.warnings + direct.warnings

    dmax = max(degrees[-1], d_probe)
    basis = bd.enumerate_basis(sys.k, dmax, cap=basis_cap, max_degree=max_degree)
    od = bd.build_overlaps(ens, sys, Aexpr, basis, labeler=labeler, standardize=standardize, backend=backend)
    warnings += od.warnings

    seq = bd.bound_sequence(od, degrees, jitter)
    boot = bd.bootstrap(od, degrees, n_resamples, seed, partition_degrees=degrees if labeler else (),
                        partition_grams=partition_grams, jitter=jitter)
    if boot.failures:
        warnings.append(f"{boot.failures}/{n_resamples} bootstrap resamples failed to factorize")
    for b, se in zip(seq, boot.stderr()):
        b.stderr = float(se)
        warnings += [f"bound_{b.d}: {n}" for n in b.notes if "jitter" in n]

    # the strict Mazur variant needs raw monomials; degree one is cheap to redo
    raw1 = bd.build_overlaps(ens, sys, Aexpr, bd.enumerate_basis(sys.k, 1), standardize=False, backend=backend)
    ms = None
    if sys.k >= 1:
        try:
            msr = bd.mazur_strict(raw1, jitter)
            msb = bd.bootstrap(raw1, [1], n_resamples, seed, jitter=jitter, with_mazur_strict=True)
            msr.stderr = float(np.nanstd(msb.mazur_strict, ddof=1))
            ms = msr.as_dict()
        except bd.BoundError as err:
            warnings.append(f"mazur_strict: {err}")

    sat = None
    if saturation_degree is not None and d_probe > saturation_degree:
        rep = bd.saturation_from_overlaps(od, saturation_degree, d_probe, C=norm.value, C_err=norm.total_error,
                                          n_resamples=n_resamples, seed=seed, jitter=jitter)
        sat = rep.as_dict()

    partitioned: dict[str, list[dict]] = {}
    cells = None
    if labeler is not None:
        for g in partition_grams:
            pseq = bd.partitioned_sequence(od, degrees, jitter, g)
            for p, se in zip(pseq, boot.partitioned_stderr(g)):
                p.stderr = float(se)
                warnings += p.notes
            partitioned[g] = [p.as_dict() for p in pseq]
        cells = {"names": list(od.cell_names), "counts": [int(c) for c in od.cell_counts],
                 "predicates": {c.name: c.source for c in labeler.cells}}

    rep = BoundReport(
        system=sys.name, beta=ens.beta, observable=A if isinstance(A, str) else ex.pretty(Aexpr), n_samples=ens.n, seed=ens.seed, T=batch.T,
        dt=batch.dt, n_traj=batch.n, standardized=standardize, estimates=[estimate_dict(norm), estimate_dict(direct)],
        bounds=[b.as_dict() for b in seq], mazur_strict=ms, saturation=sat, partitioned=partitioned, cells=cells,
        warnings=_unique(warnings), config=dict(config or {}), timestamp=timestamp(),
    )
    return rep, od
