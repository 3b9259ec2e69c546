"""Computation graph and its lowered evaluation tape.

Tracing a CAD program produces a :class:`Graph`: an arena of constants,
parameters, and smooth scalar operators, with every node's trace-time value
cached. ``lower`` flattens the live part of the graph into a :class:`Tape`,
a single-assignment register program scheduled into levels so that each
level executes as a handful of vectorized numpy operations. The tape
supports plain evaluation, reverse-mode vector-Jacobian products, forward
mode Jacobian-vector products, and dense Jacobians (forward mode, all
parameter directions batched in one sweep).

Graph construction hash-conses nodes, so syntactically identical
subexpressions are shared at build time; lowering additionally drops dead
nodes that feed no vertex or constraint output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Node/instruction opcodes. CONST and PARAM appear only in the graph;
# tape instructions are arithmetic only.
CONST, PARAM = 0, 1
ADD, SUB, MUL, DIV, NEG, SIN, COS, SQRT, EXP, LOG, POW = range(2, 13)

OP_NAMES = {
    CONST: "const",
    PARAM: "param",
    ADD: "add",
    SUB: "sub",
    MUL: "mul",
    DIV: "div",
    NEG: "neg",
    SIN: "sin",
    COS: "cos",
    SQRT: "sqrt",
    EXP: "exp",
    LOG: "log",
    POW: "pow",
}
UNARY_OPS = frozenset({NEG, SIN, COS, SQRT, EXP, LOG})
COMMUTATIVE = frozenset({ADD, MUL})


class NumericError(ArithmeticError):
    """A node or instruction produced a non-finite value."""

    def __init__(self, message: str, where: Optional[int] = None, origin: str = ""):
        self.where = where
        self.origin = origin
        detail = message
        if where is not None:
            detail += f" (at {where})"
        if origin:
            detail += f" [{origin}]"
        super().__init__(detail)


_MATH_1 = {SIN: math.sin, COS: math.cos, SQRT: math.sqrt, EXP: math.exp, LOG: math.log}


class Graph:
    """Arena of scalar nodes; construction evaluates eagerly at the current
    parameter values, so trace-time geometry falls out of building the graph."""

    def __init__(self) -> None:
        self.kinds: list[int] = []
        self.a: list[int] = []
        self.b: list[int] = []
        self.values: list[float] = []
        self.origins: list[str] = []
        self.n_params = 0
        self.origin = ""  # set by the interpreter per statement
        self._intern: dict[tuple, int] = {}
        # output bindings, filled by the interpreter before lowering
        self.vertex_outputs: list[int] = []
        self.constraint_outputs: list[int] = []
        self.constraint_labels: list[str] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def _new(self, kind: int, a: int, b: int, value: float) -> int:
        nid = len(self.kinds)
        self.kinds.append(kind)
        self.a.append(a)
        self.b.append(b)
        self.values.append(value)
        self.origins.append(self.origin)
        return nid

    def const(self, value: float) -> int:
        key = (CONST, float(value), -1)
        nid = self._intern.get(key)
        if nid is None:
            nid = self._new(CONST, -1, -1, float(value))
            self._intern[key] = nid
        return nid

    def param(self, slot: int, initial: float) -> int:
        key = (PARAM, slot, -1)
        nid = self._intern.get(key)
        if nid is None:
            nid = self._new(PARAM, slot, -1, float(initial))
            self.n_params = max(self.n_params, slot + 1)
            self._intern[key] = nid
        return nid

    def op(self, kind: int, a: int, b: int = -1) -> int:
        if kind in COMMUTATIVE and b < a:
            a, b = b, a
        key = (kind, a, b)
        nid = self._intern.get(key)
        if nid is not None:
            return nid
        va = self.values[a]
        try:
            if kind == ADD:
                value = va + self.values[b]
            elif kind == SUB:
                value = va - self.values[b]
            elif kind == MUL:
                value = va * self.values[b]
            elif kind == DIV:
                value = va / self.values[b]
            elif kind == NEG:
                value = -va
            elif kind == POW:
                value = math.pow(va, self.values[b])
            else:
                value = _MATH_1[kind](va)
        except (ValueError, ZeroDivisionError, OverflowError) as exc:
            raise NumericError(f"{OP_NAMES[kind]}: {exc}", where=len(self.kinds), origin=self.origin)
        if not math.isfinite(value):
            raise NumericError(f"{OP_NAMES[kind]} produced {value}", where=len(self.kinds), origin=self.origin)
        nid = self._new(kind, a, b, value)
        self._intern[key] = nid
        return nid

    # convenience builders
    def add(self, x: int, y: int) -> int:
        return self.op(ADD, x, y)

    def sub(self, x: int, y: int) -> int:
        return self.op(SUB, x, y)

    def mul(self, x: int, y: int) -> int:
        return self.op(MUL, x, y)

    def div(self, x: int, y: int) -> int:
        return self.op(DIV, x, y)

    def neg(self, x: int) -> int:
        return self.op(NEG, x)

    def sin(self, x: int) -> int:
        return self.op(SIN, x)

    def cos(self, x: int) -> int:
        return self.op(COS, x)

    def sqrt(self, x: int) -> int:
        return self.op(SQRT, x)

    def exp(self, x: int) -> int:
        return self.op(EXP, x)

    def log(self, x: int) -> int:
        return self.op(LOG, x)

    def pow(self, x: int, y: int) -> int:
        return self.op(POW, x, y)


def eval_graph(graph: Graph, P: Sequence[float]) -> np.ndarray:
    """Re-evaluate every node at parameters P (node order is topological by
    construction). Returns the full value vector; the graph's cache is not
    mutated."""
    P = np.asarray(P, dtype=float)
    if P.shape != (graph.n_params,):
        raise ValueError(f"expected {graph.n_params} parameters, got {P.shape}")
    n = len(graph)
    values = np.empty(n)
    kinds, aa, bb = graph.kinds, graph.a, graph.b
    for i in range(n):
        kind = kinds[i]
        if kind == CONST:
            values[i] = graph.values[i]
        elif kind == PARAM:
            values[i] = P[aa[i]]
        else:
            va = values[aa[i]]
            if kind == ADD:
                v = va + values[bb[i]]
            elif kind == SUB:
                v = va - values[bb[i]]
            elif kind == MUL:
                v = va * values[bb[i]]
            elif kind == DIV:
                den = values[bb[i]]
                v = va / den if den != 0.0 else math.inf
            elif kind == NEG:
                v = -va
            elif kind == POW:
                try:
                    v = math.pow(va, values[bb[i]])
                except (ValueError, OverflowError):
                    v = math.nan
            else:
                try:
                    v = _MATH_1[kind](va)
                except (ValueError, OverflowError):
                    v = math.nan
            if not math.isfinite(v):
                raise NumericError(
                    f"node {i} ({OP_NAMES[kind]}) evaluated to {v}", where=i, origin=graph.origins[i]
                )
            values[i] = v
    return values


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Tape:
    """Flat single-assignment register program lowered from a Graph.

    Registers [0, n_params) hold parameters; constant registers are filled
    once at warm-up; every instruction writes a fresh register. Instructions
    are grouped by (dependency level, opcode) so each group runs as a few
    vectorized array operations.
    """

    n_params: int
    n_regs: int
    const_regs: np.ndarray  # int32
    const_values: np.ndarray  # float64
    inst_op: np.ndarray  # int32, schedule order
    inst_dest: np.ndarray
    inst_a: np.ndarray
    inst_b: np.ndarray
    groups: list[tuple[int, int, int]]  # (opcode, start, end) slices into inst_*
    vertex_outputs: np.ndarray  # int32, length 3n
    constraint_outputs: np.ndarray  # int32, length k
    constraint_labels: tuple[str, ...] = ()
    _vertex_masks: Optional[list[int]] = field(default=None, repr=False)

    @property
    def n_instructions(self) -> int:
        return len(self.inst_op)

    @property
    def instruction_count(self) -> int:
        """Arithmetic operation count, the benchmark-facing size metric."""
        return len(self.inst_op)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_outputs) // 3

    @property
    def n_constraints(self) -> int:
        return len(self.constraint_outputs)

    def instructions(self) -> list[tuple[str, int, int, int]]:
        return [
            (OP_NAMES[int(o)], int(d), int(a), int(b))
            for o, d, a, b in zip(self.inst_op, self.inst_dest, self.inst_a, self.inst_b)
        ]

    def dump(self) -> str:
        lines = [f"params {self.n_params} regs {self.n_regs}"]
        for reg, val in zip(self.const_regs, self.const_values):
            lines.append(f"r{int(reg)} = const {val!r}")
        for name, d, a, b in self.instructions():
            if OP_CODE[name] in UNARY_OPS:
                lines.append(f"r{d} = {name} r{a}")
            else:
                lines.append(f"r{d} = {name} r{a} r{b}")
        lines.append("vout " + " ".join(f"r{int(r)}" for r in self.vertex_outputs))
        lines.append("gout " + " ".join(f"r{int(r)}" for r in self.constraint_outputs))
        return "\n".join(lines) + "\n"

    def warm(self, batch: Optional[int] = None) -> np.ndarray:
        """Allocate a register buffer with constants pre-filled."""
        if batch is None:
            regs = np.zeros(self.n_regs)
            regs[self.const_regs] = self.const_values
        else:
            regs = np.zeros((self.n_regs, batch))
            regs[self.const_regs] = self.const_values[:, None]
        return regs

    def vertex_param_masks(self) -> list[int]:
        """Per-vertex bitmask of parameter slots that feed its coordinates
        (ancestor reachability over the lowered program)."""
        if self._vertex_masks is None:
            masks = [0] * self.n_regs
            for slot in range(self.n_params):
                masks[slot] = 1 << slot
            for d, a, b in zip(self.inst_dest, self.inst_a, self.inst_b):
                m = masks[a]
                if b >= 0:
                    m |= masks[b]
                masks[d] = m
            vout = self.vertex_outputs
            self._vertex_masks = [
                masks[vout[3 * i]] | masks[vout[3 * i + 1]] | masks[vout[3 * i + 2]]
                for i in range(self.n_vertices)
            ]
        return self._vertex_masks


OP_CODE = {name: code for code, name in OP_NAMES.items()}


def lower(graph: Graph) -> Tape:
    """Flatten the graph into a Tape: dead-code eliminate everything that is
    not an ancestor of a vertex or constraint output, then schedule the
    survivors by dependency level. Deterministic, so lowering the same graph
    twice yields instruction-identical tapes."""
    outputs = list(graph.vertex_outputs) + list(graph.constraint_outputs)
    kinds, aa, bb = graph.kinds, graph.a, graph.b

    live = bytearray(len(graph))
    stack = [nid for nid in outputs]
    while stack:
        nid = stack.pop()
        if live[nid]:
            continue
        live[nid] = 1
        kind = kinds[nid]
        if kind in (CONST, PARAM):
            continue
        stack.append(aa[nid])
        if kind not in UNARY_OPS:
            stack.append(bb[nid])

    # levels: params/consts at 0, ops at 1 + max over inputs
    level = [0] * len(graph)
    op_nodes: list[int] = []
    for nid in range(len(graph)):
        if not live[nid]:
            continue
        kind = kinds[nid]
        if kind in (CONST, PARAM):
            continue
        lv = level[aa[nid]]
        if kind not in UNARY_OPS:
            lv = max(lv, level[bb[nid]])
        level[nid] = lv + 1
        op_nodes.append(nid)

    # register assignment: params, then live consts, then scheduled ops
    reg_of = {}
    for nid in range(len(graph)):
        if live[nid] and kinds[nid] == PARAM:
            reg_of[nid] = aa[nid]
    next_reg = graph.n_params
    const_regs: list[int] = []
    const_values: list[float] = []
    for nid in range(len(graph)):
        if live[nid] and kinds[nid] == CONST:
            reg_of[nid] = next_reg
            const_regs.append(next_reg)
            const_values.append(graph.values[nid])
            next_reg += 1
    op_nodes.sort(key=lambda nid: (level[nid], kinds[nid], nid))
    for nid in op_nodes:
        reg_of[nid] = next_reg
        next_reg += 1

    inst_op = np.array([kinds[nid] for nid in op_nodes], dtype=np.int32)
    inst_dest = np.array([reg_of[nid] for nid in op_nodes], dtype=np.int32)
    inst_a = np.array([reg_of[aa[nid]] for nid in op_nodes], dtype=np.int32)
    inst_b = np.array(
        [reg_of[bb[nid]] if kinds[nid] not in UNARY_OPS else -1 for nid in op_nodes], dtype=np.int32
    )

    groups: list[tuple[int, int, int]] = []
    start = 0
    for i in range(1, len(op_nodes) + 1):
        boundary = i == len(op_nodes) or (
            level[op_nodes[i]] != level[op_nodes[start]] or kinds[op_nodes[i]] != kinds[op_nodes[start]]
        )
        if boundary:
            groups.append((int(inst_op[start]) if i > start else 0, start, i))
            start = i

    return Tape(
        n_params=graph.n_params,
        n_regs=next_reg,
        const_regs=np.array(const_regs, dtype=np.int32),
        const_values=np.array(const_values),
        inst_op=inst_op,
        inst_dest=inst_dest,
        inst_a=inst_a,
        inst_b=inst_b,
        groups=[g for g in groups if g[2] > g[1]],
        vertex_outputs=np.array([reg_of[n] for n in graph.vertex_outputs], dtype=np.int32),
        constraint_outputs=np.array([reg_of[n] for n in graph.constraint_outputs], dtype=np.int32),
        constraint_labels=tuple(graph.constraint_labels),
    )


# ---------------------------------------------------------------------------
# Execution


def _masked(seed: np.ndarray, expr: np.ndarray) -> np.ndarray:
    """Zero out entries whose seed is exactly zero, so dead derivative paths
    through non-differentiable points (sqrt at 0, pow at 0) stay silent."""
    return np.where(seed == 0.0, 0.0, expr)


def _check_params(tape: Tape, P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape != (tape.n_params,):
        raise ValueError(f"expected {tape.n_params} parameters, got shape {P.shape}")
    return P


def _forward(tape: Tape, P: np.ndarray, regs: Optional[np.ndarray] = None) -> np.ndarray:
    if regs is None:
        regs = tape.warm()
    else:
        regs[tape.const_regs] = tape.const_values
    regs[: tape.n_params] = P
    op_, d_, a_, b_ = tape.inst_op, tape.inst_dest, tape.inst_a, tape.inst_b
    with np.errstate(all="ignore"):
        for op, s, e in tape.groups:
            d, a = d_[s:e], a_[s:e]
            va = regs[a]
            if op == ADD:
                regs[d] = va + regs[b_[s:e]]
            elif op == SUB:
                regs[d] = va - regs[b_[s:e]]
            elif op == MUL:
                regs[d] = va * regs[b_[s:e]]
            elif op == DIV:
                regs[d] = va / regs[b_[s:e]]
            elif op == NEG:
                regs[d] = -va
            elif op == SIN:
                regs[d] = np.sin(va)
            elif op == COS:
                regs[d] = np.cos(va)
            elif op == SQRT:
                regs[d] = np.sqrt(va)
            elif op == EXP:
                regs[d] = np.exp(va)
            elif op == LOG:
                regs[d] = np.log(va)
            elif op == POW:
                regs[d] = np.power(va, regs[b_[s:e]])
    # SSA: every intermediate survives in its register, so one sweep-end
    # check covers every instruction
    computed = regs[tape.inst_dest]
    if not np.all(np.isfinite(computed)):
        bad = int(np.argmin(np.isfinite(computed)))
        raise NumericError(
            f"instruction {bad} ({OP_NAMES[int(op_[bad])]}) produced a non-finite value", where=bad
        )
    return regs


def eval_tape(tape: Tape, P, regs: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate to (vertex coordinates, constraint values). ``regs`` may be a
    buffer from ``tape.warm()`` for allocation-free re-evaluation."""
    P = _check_params(tape, P)
    regs = _forward(tape, P, regs)
    return regs[tape.vertex_outputs].copy(), regs[tape.constraint_outputs].copy()


def vjp(tape: Tape, P, w_vertices, w_constraints=None) -> np.ndarray:
    """Reverse mode: dP = (dV/dP)^T w_vertices + (dg/dP)^T w_constraints."""
    P = _check_params(tape, P)
    regs = _forward(tape, P)
    w_v = np.zeros(len(tape.vertex_outputs)) if w_vertices is None else np.asarray(w_vertices, dtype=float)
    adj = np.bincount(tape.vertex_outputs, weights=w_v, minlength=tape.n_regs)
    if w_constraints is not None and len(tape.constraint_outputs):
        adj += np.bincount(tape.constraint_outputs, weights=np.asarray(w_constraints, dtype=float), minlength=tape.n_regs)
    n = tape.n_regs
    with np.errstate(all="ignore"):
        for op, s, e in reversed(tape.groups):
            d, a, b = tape.inst_dest[s:e], tape.inst_a[s:e], tape.inst_b[s:e]
            w = adj[d]
            if not np.any(w):
                continue
            va = regs[a]
            if op == ADD:
                adj += np.bincount(a, weights=w, minlength=n)
                adj += np.bincount(b, weights=w, minlength=n)
            elif op == SUB:
                adj += np.bincount(a, weights=w, minlength=n)
                adj -= np.bincount(b, weights=w, minlength=n)
            elif op == MUL:
                adj += np.bincount(a, weights=w * regs[b], minlength=n)
                adj += np.bincount(b, weights=w * va, minlength=n)
            elif op == DIV:
                vb = regs[b]
                adj += np.bincount(a, weights=w / vb, minlength=n)
                adj -= np.bincount(b, weights=w * regs[d] / vb, minlength=n)
            elif op == NEG:
                adj -= np.bincount(a, weights=w, minlength=n)
            elif op == SIN:
                adj += np.bincount(a, weights=w * np.cos(va), minlength=n)
            elif op == COS:
                adj -= np.bincount(a, weights=w * np.sin(va), minlength=n)
            elif op == SQRT:
                adj += np.bincount(a, weights=_masked(w, w * 0.5 / regs[d]), minlength=n)
            elif op == EXP:
                adj += np.bincount(a, weights=w * regs[d], minlength=n)
            elif op == LOG:
                adj += np.bincount(a, weights=w / va, minlength=n)
            elif op == POW:
                vb = regs[b]
                adj += np.bincount(a, weights=_masked(w, w * vb * np.power(va, vb - 1.0)), minlength=n)
                # exponent path: harmless nan when the exponent is a constant
                # register (leaf adjoints are never read again)
                adj += np.bincount(b, weights=_masked(w, w * regs[d] * np.log(va)), minlength=n)
    dP = adj[: tape.n_params].copy()
    if not np.all(np.isfinite(dP)):
        raise NumericError("reverse pass produced non-finite parameter gradients")
    return dP


def _tangent_sweep(tape: Tape, regs: np.ndarray, dP: np.ndarray) -> np.ndarray:
    """Forward tangent(s) given completed forward values. dP: (m,) or (m, B)."""
    batched = dP.ndim == 2
    tan = np.zeros((tape.n_regs,) + dP.shape[1:])
    tan[: tape.n_params] = dP

    def vals(idx):
        v = regs[idx]
        return v[:, None] if batched else v

    with np.errstate(all="ignore"):
        for op, s, e in tape.groups:
            d, a, b = tape.inst_dest[s:e], tape.inst_a[s:e], tape.inst_b[s:e]
            da = tan[a]
            if op == ADD:
                tan[d] = da + tan[b]
            elif op == SUB:
                tan[d] = da - tan[b]
            elif op == MUL:
                tan[d] = da * vals(b) + vals(a) * tan[b]
            elif op == DIV:
                tan[d] = (da - vals(d) * tan[b]) / vals(b)
            elif op == NEG:
                tan[d] = -da
            elif op == SIN:
                tan[d] = np.cos(vals(a)) * da
            elif op == COS:
                tan[d] = -np.sin(vals(a)) * da
            elif op == SQRT:
                tan[d] = _masked(da, da * (0.5 / vals(d)))
            elif op == EXP:
                tan[d] = vals(d) * da
            elif op == LOG:
                tan[d] = da / vals(a)
            elif op == POW:
                va, vb = vals(a), vals(b)
                term = tan[b]
                if np.any(term):
                    # masked so constant exponents never touch log(base)
                    logs = np.where(regs[a] > 0, np.log(np.where(regs[a] > 0, regs[a], 1.0)), np.nan)
                    logs = logs[:, None] if batched else logs
                    term = np.where(term == 0.0, 0.0, vals(d) * logs * term)
                tan[d] = _masked(da, vb * np.power(va, vb - 1.0) * da) + term
    tans = tan[tape.inst_dest]
    if not np.all(np.isfinite(tans)):
        bad = int(np.argmin(np.isfinite(tans).reshape(len(tape.inst_dest), -1).all(axis=1)))
        raise NumericError(
            f"instruction {bad} ({OP_NAMES[int(tape.inst_op[bad])]}) produced a non-finite tangent",
            where=bad,
        )
    return tan


def jvp(tape: Tape, P, dp) -> tuple[np.ndarray, np.ndarray]:
    """Forward mode directional derivative: (dV, dg) for direction dp."""
    P = _check_params(tape, P)
    dp = np.asarray(dp, dtype=float)
    if dp.shape != (tape.n_params,):
        raise ValueError(f"expected direction of shape ({tape.n_params},)")
    regs = _forward(tape, P)
    tan = _tangent_sweep(tape, regs, dp)
    return tan[tape.vertex_outputs].copy(), tan[tape.constraint_outputs].copy()


def jacobian(tape: Tape, P) -> np.ndarray:
    """Dense dV/dP of shape (3n, m): one batched forward sweep over all
    parameter directions."""
    return full_jacobian(tape, P)[2]


def full_jacobian(tape: Tape, P) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(V, g, dV/dP, dg/dP) in one forward + one batched tangent sweep."""
    P = _check_params(tape, P)
    regs = _forward(tape, P)
    if tape.n_params == 0:
        V = regs[tape.vertex_outputs].copy()
        g = regs[tape.constraint_outputs].copy()
        return V, g, np.zeros((len(V), 0)), np.zeros((len(g), 0))
    tan = _tangent_sweep(tape, regs, np.eye(tape.n_params))
    return (
        regs[tape.vertex_outputs].copy(),
        regs[tape.constraint_outputs].copy(),
        tan[tape.vertex_outputs].copy(),
        tan[tape.constraint_outputs].copy(),
    )
