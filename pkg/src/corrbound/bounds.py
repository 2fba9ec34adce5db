"""Lower bounds on C(A) from polynomials in the conserved quantities.

With h_n = H_1^{n_1}⋯H_k^{n_k}, G_{ab} = ⟨h_a, h_b⟩_β and v_b = ⟨A, h_b⟩_β,
the degree-d bound is vᵀG⁻¹v restricted to |n| ≤ d. It is the squared norm
of the projection of A onto V_d, and since every h_n is flow-invariant it
is also the projection of the orbital average Ā, hence ≤ ‖Ā‖²_β = C(A).

All expectations are Monte Carlo means over a Gibbs ensemble. Gram entries
depend only on a + b, so they are read from one table of monomials of degree
≤ 2d, which makes G symmetric exactly. Block sums of every tabulated column
are kept so the bootstrap can resample blocks without touching the samples
again.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import expr as ex
from . import stats
from .backend import Backend, get_backend
from .dynamics import SystemSpec
from .gibbs import GibbsEnsemble, observable_values
from .labeler import InvariantLabeler

log = logging.getLogger(__name__)

DEFAULT_BASIS_CAP = 2000
DEFAULT_MAX_DEGREE = 10
JITTER_START = 1e-12
JITTER_MAX = 1e-4
DEFAULT_RESAMPLES = 200


class BoundError(RuntimeError):
    pass


class BasisCapError(ValueError):
    pass


# ------------------------------------------------------------------ basis


@dataclass(frozen=True)
class MultiIndex:
    n: tuple[int, ...]

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if not n or min(n) < 0:
            raise ValueError("multi-index entries must be non-negative and k >= 1")
        object.__setattr__(self, "n", n)

    @property
    def degree(self) -> int:
        return sum(self.n)

    @property
    def k(self) -> int:
        return len(self.n)

    def key(self) -> tuple:
        return (self.degree, self.n)

    def __lt__(self, other: "MultiIndex") -> bool:
        return self.key() < other.key()

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a + b for a, b in zip(self.n, other.n)))

    def __iter__(self):
        return iter(self.n)

    def __str__(self):
        return "(" + ",".join(map(str, self.n)) + ")"

    def monomial(self) -> str:
        parts = [f"H{j + 1}" if e == 1 else f"H{j + 1}^{e}" for j, e in enumerate(self.n) if e]
        return "*".join(parts) or "1"


def basis_size(k: int, d: int) -> int:
    return math.comb(k + d, k)


def _compositions(k: int, total: int) -> Iterator[tuple[int, ...]]:
    if k == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(k - 1, total - first):
            yield (first,) + rest


@dataclass(frozen=True)
class MonomialBasis:
    k: int
    d: int
    indices: tuple[MultiIndex, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, i) -> MultiIndex:
        return self.indices[i]

    @cached_property
    def _pos(self) -> dict[tuple[int, ...], int]:
        return {m.n: i for i, m in enumerate(self.indices)}

    def position(self, n) -> int:
        return self._pos[tuple(n.n if isinstance(n, MultiIndex) else n)]

    def size_up_to(self, d: int) -> int:
        """Number of leading basis elements with degree ≤ d."""
        if d > self.d:
            raise ValueError(f"basis only reaches degree {self.d}")
        return basis_size(self.k, d)

    def degrees(self) -> np.ndarray:
        return np.array([m.degree for m in self.indices])


def enumerate_basis(k: int, d: int, cap: int | None = DEFAULT_BASIS_CAP,
                    max_degree: int | None = DEFAULT_MAX_DEGREE) -> MonomialBasis:
    """All multi-indices with |n| ≤ d, ordered by degree then lexicographically."""
    if k < 1 or d < 0:
        raise ValueError("need k >= 1 and d >= 0")
    if max_degree is not None and d > max_degree:
        raise BasisCapError(f"degree {d} exceeds the degree cap {max_degree}")
    nu = basis_size(k, d)
    if cap is not None and nu > cap:
        raise BasisCapError(f"basis size C({k}+{d},{k}) = {nu} exceeds the cap {cap}")
    idx = tuple(MultiIndex(c) for deg in range(d + 1) for c in _compositions(k, deg))
    return MonomialBasis(k, d, idx)


# ------------------------------------------------------------------ estimates


@dataclass
class Standardization:
    """Affine change of variables H_j -> (H_j - center_j) / scale_j.

    The span of monomials up to any degree is unchanged, so bounds are the
    same in exact arithmetic while the Gram matrix is far better conditioned.
    """

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, k: int) -> "Standardization":
        return cls(np.zeros(k), np.ones(k))

    @classmethod
    def fit(cls, H: np.ndarray) -> "Standardization":
        c = H.mean(axis=0)
        s = H.std(axis=0)
        return cls(c, np.where(s > 0, s, 1.0))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.center == 0) and np.all(self.scale == 1))

    def apply(self, H: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return H
        return (H - self.center) / self.scale


def _block_bounds(n: int, nb: int | None = None) -> np.ndarray:
    nb = nb or stats.n_batches(n)
    return np.linspace(0, n, nb + 1).astype(int)


class _Powers:
    """Per-sample powers H_j^e, built by repeated multiplication."""

    def __init__(self, H: np.ndarray, emax: int):
        self.p = [[np.ones(H.shape[0])] for _ in range(H.shape[1])]
        for j in range(H.shape[1]):
            for _ in range(emax):
                self.p[j].append(self.p[j][-1] * H[:, j])

    def monomial(self, n: Sequence[int]) -> np.ndarray:
        out = None
        for j, e in enumerate(n):
            if e:
                out = self.p[j][e] if out is None else out * self.p[j][e]
        return np.ones_like(self.p[0][0]) if out is None else out


@dataclass
class OverlapData:
    """Monte Carlo Gram matrix and overlaps, with batch-means standard errors.

    ``gram`` and ``overlaps`` are for the degree-≤d basis; per-cell arrays
    have a leading cell axis. ``cell_grams`` hold ⟨𝟙_i h_a, 𝟙_i h_b⟩_β.
    """

    basis: MonomialBasis
    gram: np.ndarray
    gram_stderr: np.ndarray
    overlaps: np.ndarray
    overlaps_stderr: np.ndarray
    n_samples: int
    standardization: Standardization
    per_cell_overlaps: np.ndarray | None = None
    per_cell_overlaps_stderr: np.ndarray | None = None
    cell_grams: np.ndarray | None = None
    cell_names: list[str] = field(default_factory=list)
    cell_counts: np.ndarray | None = None
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)
    observable: str = ""
    # sufficient statistics for block resampling
    block_sizes: np.ndarray | None = field(default=None, repr=False)
    block_M: np.ndarray | None = field(default=None, repr=False)  # (nb, ν(2d))
    block_v: np.ndarray | None = field(default=None, repr=False)  # (nb, ν)
    block_cell_M: np.ndarray | None = field(default=None, repr=False)  # (C, nb, ν(2d))
    block_cell_v: np.ndarray | None = field(default=None, repr=False)  # (C, nb, ν)
    sum_index: np.ndarray | None = field(default=None, repr=False)  # (ν, ν) column of a+b

    @property
    def nu(self) -> int:
        return len(self.basis)

    @property
    def has_cells(self) -> bool:
        return self.per_cell_overlaps is not None

    def block(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.basis.size_up_to(d)
        return self.gram[:m, :m], self.overlaps[:m]

    def resample(self, counts: np.ndarray):
        """Gram, overlaps, per-cell overlaps and per-cell Grams for block multiplicities ``counts``."""
        if self.block_M is None:
            raise BoundError("overlap data carries no block statistics; cannot bootstrap")
        total = float(counts @ self.block_sizes)
        M = counts @ self.block_M / total
        G = M[self.sum_index]
        v = counts @ self.block_v / total
        cv = cg = None
        if self.block_cell_M is not None:
            cv = np.einsum("b,cbj->cj", counts, self.block_cell_v) / total
            cM = np.einsum("b,cbj->cj", counts, self.block_cell_M) / total
            cg = cM[:, self.sum_index]
        return G, v, cv, cg


def conserved_table(ens: GibbsEnsemble, sys: SystemSpec, backend: Backend | None = None) -> np.ndarray:
    H = sys.conserved_values(ens.samples, backend)
    bad = np.flatnonzero(~np.isfinite(H).all(axis=1))
    if bad.size:
        raise BoundError(f"conserved quantity not finite at sample {int(bad[0])}")
    return H


def _block_stats(x: np.ndarray, edges: np.ndarray) -> tuple[float, float, np.ndarray]:
    sums = np.add.reduceat(x, edges[:-1])
    sizes = np.diff(edges)
    mean = float(sums.sum() / x.size)
    nb = sizes.size
    se = float((sums / sizes).std(ddof=1) / math.sqrt(nb)) if nb > 1 else 0.0
    return mean, se, sums


def build_overlaps(ens: GibbsEnsemble, sys: SystemSpec, A, basis: MonomialBasis,
                   labeler: InvariantLabeler | None = None, standardize: bool = False,
                   backend: Backend | None = None, nb: int | None = None) -> OverlapData:
    """Estimate the Gram matrix and ⟨A, h_n⟩_β (and per-cell ⟨A·𝟙_i, h_n⟩_β) on one ensemble.

    Parameters
    ----------
    A : Expression, str, callable or array
        Observable; strings may use H1..Hk.
    labeler : InvariantLabeler, optional
        Partition for the per-cell quantities. Cell means keep the full
        sample count in the denominator, so per-cell overlaps sum to the
        unpartitioned ones.
    standardize : bool
        Use monomials in (H_j - mean)/std instead of H_j.
    """
    if basis.k != sys.k:
        raise ValueError(f"basis has k={basis.k} but the system declares {sys.k} conserved quantities")
    backend = backend or get_backend()
    N = ens.n
    H = conserved_table(ens, sys, backend)
    st = Standardization.fit(H) if standardize else Standardization.identity(sys.k)
    Hs = st.apply(H)
    a = observable_values(ens, A, sys, backend)
    name = A if isinstance(A, str) else (ex.pretty(A) if isinstance(A, ex.Expression) else "")

    d = basis.d
    big = enumerate_basis(basis.k, 2 * d, cap=None, max_degree=None)
    powers = _Powers(Hs, 2 * d)
    edges = _block_bounds(N, nb)
    sizes = np.diff(edges)
    nbk = sizes.size

    cells = None
    warnings: list[str] = []
    if labeler is not None:
        lab = labeler.labels(ens.samples, backend)
        C = len(labeler)
        cells = [lab == i for i in range(C)]
        counts = np.array([int(c.sum()) for c in cells])
        for i, cnt in enumerate(counts):
            if cnt == 0:
                warnings.append(f"cell {labeler.names[i]!r} has no samples; it contributes 0")

    nu2 = len(big)
    Mmean = np.empty(nu2)
    block_M = np.empty((nbk, nu2))
    block_cell_M = np.empty((len(cells), nbk, nu2)) if cells else None
    for j, m in enumerate(big):
        col = powers.monomial(m.n)
        Mmean[j], _, block_M[:, j] = _block_stats(col, edges)
        if cells:
            for i, mask in enumerate(cells):
                block_cell_M[i, :, j] = np.add.reduceat(np.where(mask, col, 0.0), edges[:-1])

    nu = len(basis)
    sum_index = np.empty((nu, nu), dtype=np.int64)
    for p, ma in enumerate(basis):
        for q in range(p, nu):
            sum_index[p, q] = sum_index[q, p] = big.position(ma + basis[q])
    gram = Mmean[sum_index]
    block_means = block_M / sizes[:, None]
    Mse = block_means.std(axis=0, ddof=1) / math.sqrt(nbk) if nbk > 1 else np.zeros(nu2)
    gram_se = Mse[sum_index]

    v = np.empty(nu)
    vse = np.empty(nu)
    block_v = np.empty((nbk, nu))
    cv = cvse = block_cell_v = None
    if cells:
        cv = np.empty((len(cells), nu))
        cvse = np.empty((len(cells), nu))
        block_cell_v = np.empty((len(cells), nbk, nu))
    for j, m in enumerate(basis):
        col = a * powers.monomial(m.n)
        v[j], vse[j], block_v[:, j] = _block_stats(col, edges)
        if cells:
            for i, mask in enumerate(cells):
                cv[i, j], cvse[i, j], block_cell_v[i, :, j] = _block_stats(np.where(mask, col, 0.0), edges)

    cell_grams = None
    if cells:
        cell_grams = (block_cell_M.sum(axis=1) / N)[:, sum_index]

    degenerate = bool(np.all(a == 0.0))
    if degenerate:
        warnings.append("observable is identically zero on the ensemble; all bounds are 0")
    return OverlapData(
        basis=basis, gram=gram, gram_stderr=gram_se, overlaps=v, overlaps_stderr=vse, n_samples=N,
        standardization=st, per_cell_overlaps=cv, per_cell_overlaps_stderr=cvse, cell_grams=cell_grams,
        cell_names=list(labeler.names) if labeler is not None else [],
        cell_counts=counts if cells else None, degenerate=degenerate, warnings=warnings, observable=name,
        block_sizes=sizes.astype(np.float64), block_M=block_M, block_v=block_v, block_cell_M=block_cell_M,
        block_cell_v=block_cell_v, sum_index=sum_index,
    )


def build_gram(ens: GibbsEnsemble, sys: SystemSpec, basis: MonomialBasis, standardize: bool = False,
               backend: Backend | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(gram, stderr) with entry (a, b) the ensemble mean of Π_j H_j^{a_j + b_j}."""
    od = build_overlaps(ens, sys, np.ones(ens.n), basis, standardize=standardize, backend=backend)
    return od.gram, od.gram_stderr


# ------------------------------------------------------------------ linear algebra


@dataclass
class Factor:
    L: np.ndarray
    jitter: float
    cond: float
    escalations: int


def condition_number(G: np.ndarray) -> float:
    if G.size == 0:
        return 1.0
    w = np.linalg.eigvalsh(G)
    if w[0] <= 0:
        return math.inf
    return float(w[-1] / w[0])


def factorize(G: np.ndarray, jitter: float | None = None, max_jitter: float = JITTER_MAX) -> Factor:
    """Cholesky of G + jitter·diag(G), escalating jitter ×10 until it succeeds."""
    jit = JITTER_START if jitter is None else float(jitter)
    diag = np.diag(np.diag(G))
    steps = 0
    while True:
        try:
            L = np.linalg.cholesky(G + jit * diag)
            if np.all(np.isfinite(L)):
                return Factor(L, jit, condition_number(G), steps)
        except np.linalg.LinAlgError:
            pass
        if jit >= max_jitter * (1 - 1e-9):
            raise BoundError(
                f"Gram matrix not positive definite even with relative jitter {max_jitter:g}; "
                "orthogonalize the basis, use standardized monomials, or lower d"
            )
        jit = min(jit * 10.0, max_jitter)
        steps += 1


def _whiten(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    return solve_triangular(L, v, lower=True, check_finite=False)


@dataclass
class BoundResult:
    d: int
    value: float
    nu: int
    cond: float
    jitter: float
    stderr: float = math.nan
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"d": self.d, "value": self.value, "stderr": self.stderr, "nu": self.nu, "cond": self.cond,
                "jitter": self.jitter, "notes": list(self.notes)}


def _jitter_note(f: Factor) -> list[str]:
    if f.escalations:
        return [f"jitter escalated {f.escalations}x to {f.jitter:g}"]
    return []


def quadratic_bound(G: np.ndarray, v: np.ndarray, jitter: float | None = None) -> tuple[float, Factor]:
    f = factorize(G, jitter)
    w = _whiten(f.L, v)
    return float(w @ w), f


def polynomial_bound(od: OverlapData, d: int, jitter: float | None = None) -> BoundResult:
    """vᵀG⁻¹v on the degree-≤d block."""
    G, v = od.block(d)
    if od.degenerate:
        return BoundResult(d, 0.0, len(v), condition_number(G), 0.0, 0.0, ["observable is zero"])
    val, f = quadratic_bound(G, v, jitter)
    return BoundResult(d, val, len(v), f.cond, f.jitter, notes=_jitter_note(f))


def mazur_strict(od: OverlapData, jitter: float | None = None) -> BoundResult:
    """Degree-one bound over H_1..H_k only, without the constant monomial.

    Only meaningful in the raw basis: standardization mixes the constant into
    the degree-one monomials.
    """
    if not od.standardization.is_identity:
        raise BoundError("mazur_strict needs raw (unstandardized) monomials")
    m = od.basis.size_up_to(1)
    G, v = od.gram[1:m, 1:m], od.overlaps[1:m]
    if od.degenerate:
        return BoundResult(1, 0.0, m - 1, condition_number(G), 0.0, 0.0, ["observable is zero"])
    val, f = quadratic_bound(G, v, jitter)
    return BoundResult(1, val, m - 1, f.cond, f.jitter, notes=["constant monomial excluded"] + _jitter_note(f))


def _sequence_values(G: np.ndarray, v: np.ndarray, sizes: Sequence[int], jitter: float | None):
    f = factorize(G, jitter)
    w = _whiten(f.L, v)
    c = np.cumsum(w * w)
    return [float(c[s - 1]) for s in sizes], f


def bound_sequence(od: OverlapData, degrees: Sequence[int], jitter: float | None = None) -> list[BoundResult]:
    """Bounds for several degrees from one factorization of the largest block.

    The leading block of a Cholesky factor is the factor of the leading
    block, so bound_d is a partial sum of squares of L⁻¹v and is exactly
    non-decreasing in d.
    """
    degrees = sorted(set(int(d) for d in degrees))
    dmax = degrees[-1]
    G, v = od.block(dmax)
    sizes = [od.basis.size_up_to(d) for d in degrees]
    if od.degenerate:
        return [BoundResult(d, 0.0, s, math.nan, 0.0, 0.0, ["observable is zero"]) for d, s in zip(degrees, sizes)]
    vals, f = _sequence_values(G, v, sizes, jitter)
    out = []
    for d, s, val in zip(degrees, sizes, vals):
        out.append(BoundResult(d, val, s, condition_number(G[:s, :s]), f.jitter, notes=_jitter_note(f)))
    return out


# ------------------------------------------------------------------ partition


@dataclass
class PartitionedBound:
    d: int
    value: float
    per_cell: list[float]
    cell_names: list[str]
    gram: str
    jitter: list[float]
    stderr: float = math.nan
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"d": self.d, "value": self.value, "stderr": self.stderr, "gram": self.gram,
                "per_cell": dict(zip(self.cell_names, self.per_cell)), "jitter": list(self.jitter),
                "notes": list(self.notes)}


GRAM_MODES = ("cell", "global")


def _partition_values(G, cv, cg, sizes, gram, jitter):
    """Per-cell bounds for each block size in ``sizes`` (one factorization per cell)."""
    m = max(sizes)
    per = np.zeros((len(cv), len(sizes)))
    jits = []
    f_glob = factorize(G[:m, :m], jitter) if gram == "global" else None
    for i, vi in enumerate(cv):
        if f_glob is not None:
            f = f_glob
        elif cg[i][0, 0] == 0.0:
            jits.append(0.0)
            continue
        else:
            f = factorize(cg[i][:m, :m], jitter)
        w = _whiten(f.L, vi[:m])
        c = np.cumsum(w * w)
        per[i] = [c[s - 1] for s in sizes]
        jits.append(f.jitter)
    return per, jits


def partitioned_sequence(od: OverlapData, degrees: Sequence[int], jitter: float | None = None,
                         gram: str = "cell") -> list[PartitionedBound]:
    """Σ_i over cells of the projection of A·𝟙_i onto the cell's polynomials, for several d.

    ``gram="cell"`` uses G_i = ⟨𝟙_i h_a, 𝟙_i h_b⟩_β for cell i: the bound is
    the squared norm of the projection onto the span of all 𝟙_i·h_n, which
    contains V_d, so it never falls below :func:`polynomial_bound`.
    ``gram="global"`` pairs every per-cell overlap vector with the global G.
    A single cell gives the unpartitioned bound in both modes. Each cell is
    factorized once at the largest degree, so values are non-decreasing in d.
    """
    if not od.has_cells:
        raise BoundError("overlap data has no per-cell overlaps; pass a labeler to build_overlaps")
    if gram not in GRAM_MODES:
        raise ValueError(f"gram must be one of {GRAM_MODES}")
    degrees = sorted(set(int(d) for d in degrees))
    sizes = [od.basis.size_up_to(d) for d in degrees]
    notes = [w for w in od.warnings if "no samples" in w]
    nc = len(od.cell_names)
    if od.degenerate:
        return [PartitionedBound(d, 0.0, [0.0] * nc, od.cell_names, gram, [0.0] * nc, 0.0,
                                 notes + ["observable is zero"]) for d in degrees]
    per, jits = _partition_values(od.gram, od.per_cell_overlaps, od.cell_grams, sizes, gram, jitter)
    if any(j > JITTER_START for j in jits):
        notes.append(f"jitter escalated up to {max(jits):g}")
    plain, _ = _sequence_values(od.gram[: sizes[-1], : sizes[-1]], od.overlaps[: sizes[-1]], sizes, jitter)
    for d, tot, ref in zip(degrees, per.sum(axis=0), plain):
        if tot < ref - 1e-9 * abs(ref):
            notes.append(f"partitioned bound at d={d} ({tot:.6g}) is below the unpartitioned bound ({ref:.6g})")
    return [PartitionedBound(d, float(per[:, j].sum()), [float(x) for x in per[:, j]], od.cell_names, gram,
                             list(jits), notes=list(notes)) for j, d in enumerate(degrees)]


def partitioned_bound(od: OverlapData, d: int, jitter: float | None = None, gram: str = "cell") -> PartitionedBound:
    """Partition-refined bound at a single degree; see :func:`partitioned_sequence`."""
    return partitioned_sequence(od, [d], jitter, gram)[0]


# ------------------------------------------------------------------ bootstrap


@dataclass
class BootstrapResult:
    degrees: list[int]
    bounds: np.ndarray  # (R, len(degrees))
    partitioned: dict[str, np.ndarray] = field(default_factory=dict)  # gram mode -> (R, len(partition_degrees))
    partition_degrees: list[int] = field(default_factory=list)
    mazur_strict: np.ndarray | None = None
    failures: int = 0

    @staticmethod
    def _sd(x: np.ndarray) -> np.ndarray:
        return np.nanstd(x, axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1:])

    def stderr(self) -> np.ndarray:
        return self._sd(self.bounds)

    def partitioned_stderr(self, gram: str = "cell") -> np.ndarray:
        return self._sd(self.partitioned[gram])


def bootstrap(od: OverlapData, degrees: Sequence[int], n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
              partition_degrees: Sequence[int] = (), partition_grams: Sequence[str] = ("cell",),
              jitter: float | None = None, with_mazur_strict: bool = False) -> BootstrapResult:
    """Non-parametric block bootstrap of the bound sequence (and partitioned bounds)."""
    degrees = sorted(set(int(d) for d in degrees))
    pdeg = sorted(set(int(d) for d in partition_degrees))
    if od.block_sizes is None:
        raise BoundError("overlap data carries no block statistics")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
    nb = od.block_sizes.size
    counts = rng.multinomial(nb, np.full(nb, 1.0 / nb), size=n_resamples).astype(np.float64)
    sizes = [od.basis.size_up_to(d) for d in degrees]
    psizes = [od.basis.size_up_to(d) for d in pdeg]
    dmax = degrees[-1]
    mmax = od.basis.size_up_to(dmax)
    out = np.full((n_resamples, len(degrees)), np.nan)
    part = {g: np.full((n_resamples, len(pdeg)), np.nan) for g in partition_grams} if pdeg else {}
    ms = np.full(n_resamples, np.nan) if with_mazur_strict else None
    failures = 0
    for r in range(n_resamples):
        G, v, cv, cg = od.resample(counts[r])
        if od.degenerate:
            out[r] = 0.0
            continue
        try:
            vals, _ = _sequence_values(G[:mmax, :mmax], v[:mmax], sizes, jitter)
            out[r] = vals
            for g in part:
                per, _ = _partition_values(G, cv, cg, psizes, g, jitter)
                part[g][r] = per.sum(axis=0)
            if ms is not None:
                m1 = od.basis.size_up_to(1)
                ms[r] = quadratic_bound(G[1:m1, 1:m1], v[1:m1], jitter)[0]
        except BoundError:
            failures += 1
    return BootstrapResult(degrees, out, part, pdeg, ms, failures)


# ------------------------------------------------------------------ orthogonal basis


def orthogonalize(od: OverlapData, d: int, jitter: float | None = None) -> OverlapData:
    """Change to the basis L⁻¹h (L the Cholesky factor of the degree-≤d Gram).

    The transformed Gram is L⁻¹GL⁻ᵀ, the identity up to the applied jitter and
    round-off. Block statistics are dropped.
    """
    G, v = od.block(d)
    f = factorize(G, jitter)
    Linv = _whiten(f.L, np.eye(len(v)))
    G2 = Linv @ G @ Linv.T
    G2 = 0.5 * (G2 + G2.T)
    basis = enumerate_basis(od.basis.k, d, cap=None, max_degree=None)
    cv = cg = cvse = None
    if od.has_cells:
        m = len(v)
        cv = od.per_cell_overlaps[:, :m] @ Linv.T
        cvse = np.abs(od.per_cell_overlaps_stderr[:, :m]) @ np.abs(Linv.T)
        cg = np.einsum("ab,cbd,ed->cae", Linv, od.cell_grams[:, :m, :m], Linv)
    return OverlapData(
        basis=basis, gram=G2, gram_stderr=np.full_like(G2, np.nan), overlaps=Linv @ v,
        overlaps_stderr=np.abs(Linv) @ od.overlaps_stderr[: len(v)], n_samples=od.n_samples,
        standardization=od.standardization, per_cell_overlaps=cv, per_cell_overlaps_stderr=cvse, cell_grams=cg,
        cell_names=list(od.cell_names), cell_counts=od.cell_counts, degenerate=od.degenerate,
        warnings=list(od.warnings) + [f"orthogonalized with jitter {f.jitter:g}"], observable=od.observable,
    )


# ------------------------------------------------------------------ saturation


SATURATED = "consistent with saturation"
NOT_SATURATED = "not saturated"
ZERO_PROJECTION = "zero projection"
STALLED = "projection stalled below C"


@dataclass
class SaturationReport:
    d: int
    d_probe: int
    indices: list[str]  # multi-indices with d < |n| <= d_probe
    overlaps: list[float]  # raw ⟨A, h_n⟩
    overlaps_stderr: list[float]
    residuals: list[float]  # components of A along the orthonormalized h_n
    residuals_stderr: list[float]
    bound_d: float
    bound_probe: float
    bound_gap_stderr: float
    C: float | None
    C_stderr: float | None
    verdict: str
    message: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def saturation_from_overlaps(od: OverlapData, d: int, d_probe: int, C: float | None = None,
                             C_err: float | None = None, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                             jitter: float | None = None) -> SaturationReport:
    """Test whether A's projection stops growing after degree d.

    The orthonormal residual r_n is the coefficient of A on the part of h_n
    orthogonal to all earlier monomials (Gram–Schmidt in basis order). All
    r_n with |n| > d vanish iff the projection of A onto V_{d_probe} already
    lies in V_d. Raw overlaps ⟨A, h_n⟩ are listed too, but they are generally
    non-zero even when the projection is saturated.
    """
    if not d_probe > d >= 0:
        raise ValueError("need d_probe > d >= 0")
    m_d = od.basis.size_up_to(d)
    m_p = od.basis.size_up_to(d_probe)
    G, v = od.block(d_probe)
    f = factorize(G, jitter)
    w = _whiten(f.L, v)
    # bootstrap spread of the residuals and of the bound gap
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A7]))
    nb = od.block_sizes.size
    counts = rng.multinomial(nb, np.full(nb, 1.0 / nb), size=n_resamples).astype(np.float64)
    W = np.full((n_resamples, m_p), np.nan)
    for r in range(n_resamples):
        Gr, vr, _, _ = od.resample(counts[r])
        try:
            fr = factorize(Gr[:m_p, :m_p], jitter)
        except BoundError:
            continue
        W[r] = _whiten(fr.L, vr[:m_p])
    W_se = np.nanstd(W, axis=0, ddof=1)
    gap_boot = np.nansum(W[:, m_d:] ** 2, axis=1)
    gap_se = float(np.nanstd(gap_boot, ddof=1))
    res = w[m_d:]
    res_se = W_se[m_d:]
    scale = math.sqrt(max(float(w @ w), 1e-300))
    floor = 1e-9 * scale
    zero_res = bool(np.all(np.abs(res) <= 3 * res_se + floor))
    # every component, constant included, indistinguishable from 0
    zero_all = bool(np.all(np.abs(w) <= 3 * W_se + floor))
    b_d = float(w[:m_d] @ w[:m_d])
    b_p = float(w @ w)
    if od.degenerate:
        verdict, msg = SATURATED, "observable is zero; every bound is 0"
    elif not zero_res:
        verdict, msg = NOT_SATURATED, f"some residuals beyond degree {d} differ from 0 by more than 3 sigma"
    else:
        verdict, msg = SATURATED, f"all residuals for {d} < |n| <= {d_probe} are within 3 sigma of 0"
        if C is not None:
            b_se = float(np.nanstd(np.nansum(W[:, :m_d] ** 2, axis=1), ddof=1))
            err = math.hypot(C_err or 0.0, b_se)
            if zero_all and C > 3 * (C_err or 0.0) and C > 0:
                verdict = ZERO_PROJECTION
                msg = (f"projection onto conserved-quantity polynomials is 0 up to degree {d_probe} while "
                       f"C = {C:.4g} ± {C_err or 0.0:.2g}; polynomials in H capture none of C(A)")
            elif C - b_d > 3 * err:
                verdict = STALLED
                msg = (f"residuals vanish but bound_{d} = {b_d:.4g} is below C = {C:.4g} by more than 3 sigma; "
                       "the part of C(A) not seen by these polynomials needs another conserved quantity or a partition")
            else:
                msg += f"; bound_{d} = {b_d:.4g} matches C = {C:.4g} within 3 sigma"
    idx = [str(m) for m in od.basis.indices[m_d:m_p]]
    return SaturationReport(
        d=d, d_probe=d_probe, indices=idx, overlaps=[float(x) for x in v[m_d:]],
        overlaps_stderr=[float(x) for x in od.overlaps_stderr[m_d:m_p]], residuals=[float(x) for x in res],
        residuals_stderr=[float(x) for x in res_se], bound_d=b_d, bound_probe=b_p, bound_gap_stderr=gap_se,
        C=C, C_stderr=C_err, verdict=verdict, message=msg,
    )


def saturation_diagnostic(ens: GibbsEnsemble, sys: SystemSpec, A, d: int, d_probe: int, C: float | None = None,
                          C_err: float | None = None, standardize: bool = True, **kw) -> SaturationReport:
    basis = enumerate_basis(sys.k, d_probe)
    od = build_overlaps(ens, sys, A, basis, standardize=standardize)
    return saturation_from_overlaps(od, d, d_probe, C, C_err, **kw)
