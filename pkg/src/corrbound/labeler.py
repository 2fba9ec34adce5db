"""Flow-invariant partitions of phase space given by user predicates.

A labeler is an ordered list of named cells. Each cell is a conjunction of
comparisons between expressions, e.g. ``p1 > 0 and H1 > 1``. A point gets
the first cell whose predicate holds; a cell written as ``otherwise`` catches
everything left. Points matching no cell are an error.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .backend import Backend, get_backend
from .dynamics import SystemSpec
from .program import compile_expression

_CMP = re.compile(r"(<=|>=|<|>)")
_AND = re.compile(r"\band\b|&&|∧")
_OPS = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}
CATCH_ALL = ("otherwise", "else", "true")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class Comparison:
    left: ex.Expression
    op: str
    right: ex.Expression

    def __str__(self):
        return f"{ex.pretty(self.left)} {self.op} {ex.pretty(self.right)}"


@dataclass(frozen=True)
class Cell:
    name: str
    clauses: tuple[Comparison, ...]  # empty means catch-all
    source: str = ""

    @property
    def catch_all(self) -> bool:
        return not self.clauses


def parse_predicate(text: str, sys: SystemSpec) -> tuple[Comparison, ...]:
    text = text.strip()
    if text.lower() in CATCH_ALL:
        return ()
    clauses = []
    for part in _AND.split(text):
        pieces = _CMP.split(part)
        if len(pieces) != 3:
            raise LabelError(f"cannot read comparison {part.strip()!r}; expected 'expr OP expr' with OP in < <= > >=")
        left, op, right = pieces
        clauses.append(Comparison(sys.parse(left), op, sys.parse(right)))
    return tuple(clauses)


@dataclass
class InvariantLabeler:
    cells: tuple[Cell, ...]
    system: SystemSpec = field(repr=False)

    def __post_init__(self):
        if not self.cells:
            raise LabelError("a labeler needs at least one cell")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise LabelError(f"duplicate cell names in {names}")

    @classmethod
    def from_predicates(cls, sys: SystemSpec, predicates: Sequence[tuple[str, str]] | dict) -> "InvariantLabeler":
        items = predicates.items() if isinstance(predicates, dict) else predicates
        return cls(tuple(Cell(name, parse_predicate(text, sys), text) for name, text in items), sys)

    @classmethod
    def trivial(cls, sys: SystemSpec) -> "InvariantLabeler":
        return cls((Cell("all", (), "otherwise"),), sys)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cells]

    def __len__(self) -> int:
        return len(self.cells)

    def labels(self, X: np.ndarray, backend: Backend | None = None, strict: bool = True) -> np.ndarray:
        """Cell index per row of ``X``; -1 for rows matching no cell unless ``strict``."""
        b = backend or get_backend()
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        out = np.full(X.shape[0], -1, dtype=np.int64)
        cache: dict[ex.Expression, np.ndarray] = {}

        def values(e):
            if e not in cache:
                cache[e] = b.eval_batch(compile_expression(e, self.system.r), X)
            return cache[e]

        for i, cell in enumerate(self.cells):
            free = out < 0
            if not free.any():
                break
            hit = free.copy()
            for c in cell.clauses:
                hit &= _OPS[c.op](values(c.left), values(c.right))
            out[hit] = i
        if strict and (out < 0).any():
            j = int(np.flatnonzero(out < 0)[0])
            raise LabelError(f"sample {j} ({X[j].tolist()}) matches no cell of {self.names}")
        return out


def pendulum_labeler(sys: SystemSpec) -> InvariantLabeler:
    """Rotators by direction and librators, separated at the separatrix H = 1."""
    return InvariantLabeler.from_predicates(
        sys, [("rotators+", "p1 > 0 and H1 > 1"), ("rotators-", "p1 < 0 and H1 > 1"), ("librators", "H1 <= 1")]
    )


@dataclass
class InvarianceCheck:
    n_trajectories: int
    n_changed: int
    T: float
    dt: float
    changed_indices: list[int]

    @property
    def fraction_changed(self) -> float:
        return self.n_changed / self.n_trajectories if self.n_trajectories else 0.0

    @property
    def ok(self) -> bool:
        return self.n_changed == 0


def check_invariance(labeler: InvariantLabeler, X: np.ndarray, T: float, dt: float, n_checks: int = 50,
                     backend: Backend | None = None) -> InvarianceCheck:
    """Integrate from every row of ``X`` and count trajectories whose label changes.

    Labels are compared at ``n_checks`` evenly spaced times in (0, T].
    """
    sys = labeler.system
    b = backend or get_backend()
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    steps_total = max(1, int(round(T / dt)))
    seg = max(1, steps_total // n_checks)
    first = labeler.labels(X, b, strict=False)
    changed = np.zeros(X.shape[0], dtype=bool)
    state = X.copy()
    done = 0
    while done < steps_total:
        n = min(seg, steps_total - done)
        state = b.leapfrog_orbits(sys.force_programs, sys.conserved_programs, None, state, dt, n).x_end
        done += n
        changed |= labeler.labels(state, b, strict=False) != first
    idx = np.flatnonzero(changed)
    return InvarianceCheck(X.shape[0], int(idx.size), done * dt, dt, idx[:20].tolist())
