"""Stack bytecode for expressions, executed by the compiled and numpy backends.

A program is a flat int32 array of ``(opcode, argument)`` pairs plus a
float64 constant pool. Variables are addressed by column in a state row
laid out as ``q1..qr, p1..pr``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import Binary, Call, Const, Expression, Neg, Var

OP_CONST, OP_VAR, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_NEG = range(8)
OP_SIN, OP_COS, OP_EXP, OP_SQRT, OP_LOG, OP_IPOW = range(8, 14)

_FUNC_OPS = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "sqrt": OP_SQRT, "log": OP_LOG}
_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}

MAX_STACK = 64
MAX_IPOW = 64

# error codes shared with the compiled kernels
ERR_OK, ERR_DIV, ERR_SQRT, ERR_LOG, ERR_POW, ERR_STACK = range(6)
ERROR_MESSAGES = {
    ERR_DIV: "division by zero",
    ERR_SQRT: "domain error: sqrt of negative value",
    ERR_LOG: "domain error: log of non-positive value",
    ERR_POW: "domain error: negative base raised to non-integer power",
    ERR_STACK: "expression too deep for evaluation stack",
}


@dataclass(frozen=True)
class Program:
    code: np.ndarray  # int32, shape (2*nops,)
    consts: np.ndarray  # float64
    r: int
    depth: int
    source: str = ""

    @property
    def nops(self) -> int:
        return len(self.code) // 2


def compile_expression(e: Expression, r: int) -> Program:
    code: list[int] = []
    consts: list[float] = []
    depth = 0
    max_depth = 0

    def push(n=1):
        nonlocal depth, max_depth
        depth += n
        max_depth = max(max_depth, depth)

    def emit(node):
        if isinstance(node, Const):
            consts.append(node.value)
            code.extend((OP_CONST, len(consts) - 1))
            push()
        elif isinstance(node, Var):
            if node.index > r:
                raise ValueError(f"variable {node.kind}{node.index} out of range for r={r}")
            col = node.index - 1 + (r if node.kind == "p" else 0)
            code.extend((OP_VAR, col))
            push()
        elif isinstance(node, Neg):
            emit(node.arg)
            code.extend((OP_NEG, 0))
        elif isinstance(node, Call):
            emit(node.arg)
            code.extend((_FUNC_OPS[node.func], 0))
        elif isinstance(node, Binary):
            rv = node.right
            if (
                node.op == "^"
                and isinstance(rv, Const)
                and rv.value.is_integer()
                and 0 <= rv.value <= MAX_IPOW
            ):
                emit(node.left)
                code.extend((OP_IPOW, int(rv.value)))
                return
            emit(node.left)
            emit(rv)
            code.extend((_BIN_OPS[node.op], 0))
            push(-1)
        else:  # pragma: no cover
            raise TypeError(f"not an expression node: {node!r}")

    emit(e)
    if max_depth > MAX_STACK:
        raise ValueError(f"expression needs stack depth {max_depth} > {MAX_STACK}")
    return Program(
        code=np.asarray(code, dtype=np.int32),
        consts=np.asarray(consts, dtype=np.float64),
        r=r,
        depth=max_depth,
        source=str(e),
    )


@dataclass(frozen=True)
class ProgramSet:
    """Several programs packed contiguously for the kernels."""

    code: np.ndarray
    code_offsets: np.ndarray  # int32, len nprog+1, in opcode pairs
    consts: np.ndarray
    const_offsets: np.ndarray  # int32, len nprog+1
    r: int
    programs: tuple[Program, ...]

    def __len__(self) -> int:
        return len(self.programs)


def pack(programs: Sequence[Program]) -> ProgramSet:
    if not programs:
        raise ValueError("empty program set")
    r = programs[0].r
    code_off = [0]
    const_off = [0]
    for p in programs:
        if p.r != r:
            raise ValueError("programs compiled for different dimensions")
        code_off.append(code_off[-1] + p.nops)
        const_off.append(const_off[-1] + len(p.consts))
    return ProgramSet(
        code=np.ascontiguousarray(np.concatenate([p.code for p in programs]), dtype=np.int32),
        code_offsets=np.asarray(code_off, dtype=np.int32),
        consts=np.ascontiguousarray(
            np.concatenate([p.consts for p in programs]) if const_off[-1] else np.zeros(1), dtype=np.float64
        ),
        const_offsets=np.asarray(const_off, dtype=np.int32),
        r=r,
        programs=tuple(programs),
    )


def _ipow(x: np.ndarray, n: int) -> np.ndarray:
    # exponentiation by squaring, same multiplication order as the C kernel
    result = np.ones_like(x)
    base = x.copy()
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


def run_numpy(prog: Program, X: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Vectorised interpreter. Returns ``(values, error_code, first_bad_row)``."""
    n = X.shape[0]
    stack: list[np.ndarray] = []
    code = prog.code
    err = ERR_OK
    bad = -1

    def flag(mask, code_):
        nonlocal err, bad
        if err == ERR_OK and mask.any():
            err = code_
            bad = int(np.argmax(mask))

    with np.errstate(all="ignore"):
        for k in range(0, len(code), 2):
            op, arg = int(code[k]), int(code[k + 1])
            if op == OP_CONST:
                stack.append(np.full(n, prog.consts[arg]))
            elif op == OP_VAR:
                stack.append(X[:, arg].copy())
            elif op == OP_NEG:
                stack[-1] = -stack[-1]
            elif op == OP_IPOW:
                stack[-1] = _ipow(stack[-1], arg)
            elif op >= OP_SIN:
                a = stack[-1]
                if op == OP_SIN:
                    stack[-1] = np.sin(a)
                elif op == OP_COS:
                    stack[-1] = np.cos(a)
                elif op == OP_EXP:
                    stack[-1] = np.exp(a)
                elif op == OP_SQRT:
                    flag(a < 0, ERR_SQRT)
                    stack[-1] = np.sqrt(a)
                elif op == OP_LOG:
                    flag(a <= 0, ERR_LOG)
                    stack[-1] = np.log(a)
            else:
                b = stack.pop()
                a = stack[-1]
                if op == OP_ADD:
                    stack[-1] = a + b
                elif op == OP_SUB:
                    stack[-1] = a - b
                elif op == OP_MUL:
                    stack[-1] = a * b
                elif op == OP_DIV:
                    flag(b == 0, ERR_DIV)
                    stack[-1] = a / b
                elif op == OP_POW:
                    flag((a < 0) & (b != np.floor(b)), ERR_POW)
                    flag((a == 0) & (b < 0), ERR_DIV)
                    stack[-1] = np.power(a, b)
    return stack[-1], err, bad
