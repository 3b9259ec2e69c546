"""Textual CAD language: AST, parser, pretty-printer, and static validation.

The language is line-oriented. A program is a sequence of parameter
declarations followed by statements; statements create solids, transform
them, and impose constraints:

    param w = 1.0
    param h = 2.0
    pragma epsilon = 1e-4
    solid b = box(w, h, 1.0)
    let half = w * 0.5
    clamp(0.25, w / h, 4.0)
    translate(b, 0.0, 0.0, half)
    for i in 0..3
        solid d = box(0.2, 0.2, 0.2)
        translate(d, i * 0.3, 0.0, 0.0)
    end

Scalar expressions are built from parameters, literals, let-bindings,
vertex-coordinate references (``b.vert(3).x``) and the smooth operator set
{+, -, *, /, sin, cos, sqrt, pow, exp, log}. Loop bounds and every
vertex/edge/face index must be compile-time integer expressions; this is
what keeps mesh topology independent of parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

AXES = ("x", "y", "z")
FUNCTIONS_1 = ("sin", "cos", "sqrt", "exp", "log")
FUNCTIONS_2 = ("pow",)


class SyntaxTreeError(ValueError):
    """Raised by ``parse`` on malformed source, with position information."""

    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = expected
        loc = f"line {line}, col {col}"
        if expected:
            message = f"{message} (expected one of: {', '.join(expected)})"
        super().__init__(f"{loc}: {message}")


@dataclass(frozen=True)
class Span:
    line: int
    col: int
    end_line: int = 0
    end_col: int = 0

    def __repr__(self) -> str:  # compact in test diffs
        return f"Span({self.line}:{self.col})"


NO_SPAN = Span(0, 0)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    line: int
    col: int

    def to_json(self) -> dict:
        return {"severity": self.severity, "message": self.message, "line": self.line, "col": self.col}


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class Num:
    value: float
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Name:
    ident: str
    span: Span = NO_SPAN


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    lhs: "Expr"
    rhs: "Expr"
    span: Span = NO_SPAN


@dataclass(frozen=True)
class UnaryNeg:
    operand: "Expr"
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Call:
    func: str  # sin cos sqrt exp log pow
    args: tuple["Expr", ...]
    span: Span = NO_SPAN


@dataclass(frozen=True)
class VertRef:
    solid: str
    index: "Expr"  # must be an integer expression
    axis: str  # x|y|z
    span: Span = NO_SPAN


Expr = Union[Num, Name, BinOp, UnaryNeg, Call, VertRef]


# ---------------------------------------------------------------------------
# Statements


@dataclass(frozen=True)
class ParamDecl:
    name: str
    initial: float
    span: Span = NO_SPAN
    value_span: Span = NO_SPAN  # location of the numeric literal, for rewriting


@dataclass(frozen=True)
class Pragma:
    key: str
    value: float
    span: Span = NO_SPAN


@dataclass(frozen=True)
class SolidDecl:
    name: str
    primitive: str  # box | rect | cylinder
    args: tuple[Expr, ...]  # cylinder's trailing side count is an int expr
    span: Span = NO_SPAN


@dataclass(frozen=True)
class LetDecl:
    name: str
    expr: Expr
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Target:
    """A whole solid, or an explicit vertex-id selection on one."""

    solid: str
    verts: Optional[tuple[Expr, ...]] = None  # None = whole solid
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Translate:
    target: Target
    delta: tuple[Expr, Expr, Expr]
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Rotate:
    target: Target
    axis: str
    angle: Expr  # radians
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Scale:
    target: Target
    factors: tuple[Expr, Expr, Expr]  # uniform scale stores the same expr 3x
    uniform: bool = False
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Extrude:
    solid: str
    face: Expr  # integer expression
    length: Expr
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Chamfer:
    """Cut the corner at vertex ``corner`` between edges (prev,corner) and (corner,next)."""

    solid: str
    prev: Expr
    corner: Expr
    next: Expr
    radius: Expr
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Clamp:
    lo: Expr
    mid: Expr
    hi: Expr
    span: Span = NO_SPAN


@dataclass(frozen=True)
class Loop:
    var: str
    start: Expr  # integer expressions
    stop: Expr
    body: tuple["Statement", ...]
    span: Span = NO_SPAN


Statement = Union[Pragma, SolidDecl, LetDecl, Translate, Rotate, Scale, Extrude, Chamfer, Clamp, Loop]


@dataclass(frozen=True)
class Program:
    params: tuple[ParamDecl, ...]
    statements: tuple[Statement, ...]

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def initial_values(self) -> list[float]:
        return [p.initial for p in self.params]

    def pragma(self, key: str, default: float) -> float:
        for stmt in self.statements:
            if isinstance(stmt, Pragma) and stmt.key == key:
                return stmt.value
        return default


# ---------------------------------------------------------------------------
# Tokenizer


@dataclass(frozen=True)
class Token:
    kind: str  # ident | number | punct | eol | eof
    text: str
    line: int
    col: int


_PUNCT = ("..", "(", ")", ",", "=", "+", "-", "*", "/", ".")


def _tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0]
        i, n = 0, len(line)
        while i < n:
            c = line[i]
            if c in " \t\r":
                i += 1
                continue
            col = i + 1
            if c.isalpha() or c == "_":
                j = i
                while j < n and (line[j].isalnum() or line[j] == "_"):
                    j += 1
                tokens.append(Token("ident", line[i:j], lineno, col))
                i = j
                continue
            if c.isdigit() or (c == "." and i + 1 < n and line[i + 1].isdigit()):
                j = i
                seen_dot = False
                while j < n and (line[j].isdigit() or (line[j] == "." and not seen_dot)):
                    if line[j] == ".":
                        # ".." is the range operator, not part of a number
                        if j + 1 < n and line[j + 1] == ".":
                            break
                        seen_dot = True
                    j += 1
                if j < n and line[j] in "eE":
                    k = j + 1
                    if k < n and line[k] in "+-":
                        k += 1
                    if k < n and line[k].isdigit():
                        j = k
                        while j < n and line[j].isdigit():
                            j += 1
                tokens.append(Token("number", line[i:j], lineno, col))
                i = j
                continue
            if line.startswith("..", i):
                tokens.append(Token("punct", "..", lineno, col))
                i += 2
                continue
            if c in "(),=+-*/.":
                tokens.append(Token("punct", c, lineno, col))
                i += 1
                continue
            raise SyntaxTreeError(f"unexpected character {c!r}", lineno, col)
        if tokens and tokens[-1].kind != "eol":
            tokens.append(Token("eol", "", lineno, len(line) + 1))
    tokens.append(Token("eof", "", text.count("\n") + 1, 1))
    return tokens


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def fail(self, message: str, expected: tuple[str, ...] = ()) -> SyntaxTreeError:
        tok = self.peek()
        return SyntaxTreeError(message, tok.line, tok.col, expected)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            got = tok.text or tok.kind
            raise self.fail(f"got {got!r}", expected=(want,))
        return self.advance()

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def skip_eols(self) -> None:
        while self.at("eol"):
            self.advance()

    # -- expressions --------------------------------------------------------

    def parse_expr(self) -> Expr:
        return self._additive()

    def _additive(self) -> Expr:
        lhs = self._multiplicative()
        while self.at("punct", "+") or self.at("punct", "-"):
            op = self.advance()
            rhs = self._multiplicative()
            lhs = BinOp(op.text, lhs, rhs, Span(op.line, op.col))
        return lhs

    def _multiplicative(self) -> Expr:
        lhs = self._unary()
        while self.at("punct", "*") or self.at("punct", "/"):
            op = self.advance()
            rhs = self._unary()
            lhs = BinOp(op.text, lhs, rhs, Span(op.line, op.col))
        return lhs

    def _unary(self) -> Expr:
        if self.at("punct", "-"):
            op = self.advance()
            return UnaryNeg(self._unary(), Span(op.line, op.col))
        return self._atom()

    def _atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Num(float(tok.text), Span(tok.line, tok.col))
        if tok.kind == "punct" and tok.text == "(":
            self.advance()
            inner = self.parse_expr()
            self.expect("punct", ")")
            return inner
        if tok.kind == "ident":
            self.advance()
            span = Span(tok.line, tok.col)
            if tok.text in FUNCTIONS_1 and self.at("punct", "("):
                self.advance()
                arg = self.parse_expr()
                self.expect("punct", ")")
                return Call(tok.text, (arg,), span)
            if tok.text in FUNCTIONS_2 and self.at("punct", "("):
                self.advance()
                a = self.parse_expr()
                self.expect("punct", ",")
                b = self.parse_expr()
                self.expect("punct", ")")
                return Call(tok.text, (a, b), span)
            if self.at("punct", "."):
                return self._vert_ref(tok, span)
            return Name(tok.text, span)
        raise self.fail(f"got {tok.text or tok.kind!r}", expected=("number", "identifier", "("))

    def _vert_ref(self, solid_tok: Token, span: Span) -> VertRef:
        self.expect("punct", ".")
        kw = self.expect("ident")
        if kw.text != "vert":
            raise SyntaxTreeError("got " + repr(kw.text), kw.line, kw.col, expected=("vert",))
        self.expect("punct", "(")
        index = self.parse_expr()
        self.expect("punct", ")")
        self.expect("punct", ".")
        axis = self.expect("ident")
        if axis.text not in AXES:
            raise SyntaxTreeError("got " + repr(axis.text), axis.line, axis.col, expected=AXES)
        return VertRef(solid_tok.text, index, axis.text, span)

    # -- statements ---------------------------------------------------------

    def parse_program(self) -> Program:
        params: list[ParamDecl] = []
        statements: list[Statement] = []
        self.skip_eols()
        # header: parameter declarations, with pragmas allowed between them
        while self.at("ident", "param") or self.at("ident", "pragma"):
            if self.at("ident", "param"):
                params.append(self._param_decl())
            else:
                statements.append(self._pragma())
            self.skip_eols()
        while not self.at("eof"):
            statements.append(self._statement())
            self.skip_eols()
        return Program(tuple(params), tuple(statements))

    def _param_decl(self) -> ParamDecl:
        kw = self.expect("ident", "param")
        name = self.expect("ident")
        self.expect("punct", "=")
        neg = False
        if self.at("punct", "-"):
            self.advance()
            neg = True
        num = self.expect("number")
        self.expect("eol")
        value = -float(num.text) if neg else float(num.text)
        return ParamDecl(
            name.text,
            value,
            Span(kw.line, kw.col),
            Span(num.line, num.col - (1 if neg else 0)),
        )

    def _statement(self) -> Statement:
        tok = self.peek()
        if tok.kind != "ident":
            raise self.fail(f"got {tok.text or tok.kind!r}", expected=("statement keyword",))
        handlers = {
            "pragma": self._pragma,
            "solid": self._solid_decl,
            "let": self._let_decl,
            "translate": self._translate,
            "rotate": self._rotate,
            "scale": self._scale,
            "extrude": self._extrude,
            "chamfer": self._chamfer,
            "clamp": self._clamp,
            "for": self._loop,
        }
        handler = handlers.get(tok.text)
        if handler is None:
            raise self.fail(f"got {tok.text!r}", expected=tuple(sorted(handlers)))
        return handler()

    def _pragma(self) -> Pragma:
        kw = self.expect("ident", "pragma")
        key = self.expect("ident")
        self.expect("punct", "=")
        num = self.expect("number")
        self.expect("eol")
        return Pragma(key.text, float(num.text), Span(kw.line, kw.col))

    def _let_decl(self) -> LetDecl:
        kw = self.expect("ident", "let")
        name = self.expect("ident")
        self.expect("punct", "=")
        expr = self.parse_expr()
        self.expect("eol")
        return LetDecl(name.text, expr, Span(kw.line, kw.col))

    def _solid_decl(self) -> SolidDecl:
        kw = self.expect("ident", "solid")
        name = self.expect("ident")
        self.expect("punct", "=")
        prim = self.expect("ident")
        arity = {"box": 3, "rect": 2, "cylinder": 3}
        if prim.text not in arity:
            raise SyntaxTreeError("got " + repr(prim.text), prim.line, prim.col, expected=tuple(arity))
        self.expect("punct", "(")
        args = [self.parse_expr()]
        for _ in range(arity[prim.text] - 1):
            self.expect("punct", ",")
            args.append(self.parse_expr())
        self.expect("punct", ")")
        self.expect("eol")
        return SolidDecl(name.text, prim.text, tuple(args), Span(kw.line, kw.col))

    def _target(self) -> Target:
        name = self.expect("ident")
        span = Span(name.line, name.col)
        if self.at("punct", "."):
            self.advance()
            kw = self.expect("ident")
            if kw.text != "verts":
                raise SyntaxTreeError("got " + repr(kw.text), kw.line, kw.col, expected=("verts",))
            self.expect("punct", "(")
            ids = [self.parse_expr()]
            while self.at("punct", ","):
                self.advance()
                ids.append(self.parse_expr())
            self.expect("punct", ")")
            return Target(name.text, tuple(ids), span)
        return Target(name.text, None, span)

    def _translate(self) -> Translate:
        kw = self.expect("ident", "translate")
        self.expect("punct", "(")
        target = self._target()
        deltas = []
        for _ in range(3):
            self.expect("punct", ",")
            deltas.append(self.parse_expr())
        self.expect("punct", ")")
        self.expect("eol")
        return Translate(target, tuple(deltas), Span(kw.line, kw.col))

    def _rotate(self) -> Rotate:
        kw = self.expect("ident", "rotate")
        self.expect("punct", "(")
        target = self._target()
        self.expect("punct", ",")
        axis = self.expect("ident")
        if axis.text not in AXES:
            raise SyntaxTreeError("got " + repr(axis.text), axis.line, axis.col, expected=AXES)
        self.expect("punct", ",")
        angle = self.parse_expr()
        self.expect("punct", ")")
        self.expect("eol")
        return Rotate(target, axis.text, angle, Span(kw.line, kw.col))

    def _scale(self) -> Scale:
        kw = self.expect("ident", "scale")
        self.expect("punct", "(")
        target = self._target()
        self.expect("punct", ",")
        first = self.parse_expr()
        if self.at("punct", ","):
            self.advance()
            second = self.parse_expr()
            self.expect("punct", ",")
            third = self.parse_expr()
            self.expect("punct", ")")
            self.expect("eol")
            return Scale(target, (first, second, third), False, Span(kw.line, kw.col))
        self.expect("punct", ")")
        self.expect("eol")
        return Scale(target, (first, first, first), True, Span(kw.line, kw.col))

    def _extrude(self) -> Extrude:
        kw = self.expect("ident", "extrude")
        self.expect("punct", "(")
        solid = self.expect("ident")
        self.expect("punct", ".")
        face_kw = self.expect("ident")
        if face_kw.text != "face":
            raise SyntaxTreeError("got " + repr(face_kw.text), face_kw.line, face_kw.col, expected=("face",))
        self.expect("punct", "(")
        face = self.parse_expr()
        self.expect("punct", ")")
        self.expect("punct", ",")
        length = self.parse_expr()
        self.expect("punct", ")")
        self.expect("eol")
        return Extrude(solid.text, face, length, Span(kw.line, kw.col))

    def _chamfer(self) -> Chamfer:
        kw = self.expect("ident", "chamfer")
        self.expect("punct", "(")
        solid = self.expect("ident")
        ids = []
        for _ in range(3):
            self.expect("punct", ",")
            ids.append(self.parse_expr())
        self.expect("punct", ",")
        radius = self.parse_expr()
        self.expect("punct", ")")
        self.expect("eol")
        return Chamfer(solid.text, ids[0], ids[1], ids[2], radius, Span(kw.line, kw.col))

    def _clamp(self) -> Clamp:
        kw = self.expect("ident", "clamp")
        self.expect("punct", "(")
        lo = self.parse_expr()
        self.expect("punct", ",")
        mid = self.parse_expr()
        self.expect("punct", ",")
        hi = self.parse_expr()
        self.expect("punct", ")")
        self.expect("eol")
        return Clamp(lo, mid, hi, Span(kw.line, kw.col))

    def _loop(self) -> Loop:
        kw = self.expect("ident", "for")
        var = self.expect("ident")
        self.expect("ident", "in")
        start = self.parse_expr()
        self.expect("punct", "..")
        stop = self.parse_expr()
        self.expect("eol")
        self.skip_eols()
        body: list[Statement] = []
        while not self.at("ident", "end"):
            if self.at("eof"):
                raise self.fail("unterminated loop", expected=("end",))
            body.append(self._statement())
            self.skip_eols()
        self.expect("ident", "end")
        if not self.at("eof"):
            self.expect("eol")
        return Loop(var.text, start, stop, tuple(body), Span(kw.line, kw.col))


def parse(text: str) -> Program:
    """Parse DSL source into a Program. Raises SyntaxTreeError on bad input."""
    return _Parser(_tokenize(text)).parse_program()


# ---------------------------------------------------------------------------
# Pretty-printer (canonical formatting; parse(pretty_print(p)) == p)


def format_expr(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, Num):
        # integer-valued literals keep integer spelling; all literals parse
        # back to the same float, so round-trips are unaffected
        return str(int(e.value)) if _is_int_literal(e) else repr(e.value)
    if isinstance(e, Name):
        return e.ident
    if isinstance(e, VertRef):
        return f"{e.solid}.vert({format_expr(e.index)}).{e.axis}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, UnaryNeg):
        inner = format_expr(e.operand, 3)
        return f"-{inner}"
    if isinstance(e, BinOp):
        prec = 1 if e.op in "+-" else 2
        lhs = format_expr(e.lhs, prec)
        rhs = format_expr(e.rhs, prec + 1)  # left-assoc: parenthesize rhs at equal prec
        out = f"{lhs} {e.op} {rhs}"
        if prec < parent_prec:
            out = f"({out})"
        return out
    raise TypeError(f"unknown expression node {e!r}")


def _is_int_literal(e: Num) -> bool:
    return float(e.value).is_integer() and abs(e.value) < 1e9


def _format_target(t: Target) -> str:
    if t.verts is None:
        return t.solid
    return f"{t.solid}.verts({', '.join(format_expr(v) for v in t.verts)})"


def _format_stmt(s: Statement, indent: int, out: list[str]) -> None:
    pad = "    " * indent
    if isinstance(s, Pragma):
        out.append(f"{pad}pragma {s.key} = {repr(s.value)}")
    elif isinstance(s, SolidDecl):
        out.append(f"{pad}solid {s.name} = {s.primitive}({', '.join(format_expr(a) for a in s.args)})")
    elif isinstance(s, LetDecl):
        out.append(f"{pad}let {s.name} = {format_expr(s.expr)}")
    elif isinstance(s, Translate):
        args = ", ".join(format_expr(d) for d in s.delta)
        out.append(f"{pad}translate({_format_target(s.target)}, {args})")
    elif isinstance(s, Rotate):
        out.append(f"{pad}rotate({_format_target(s.target)}, {s.axis}, {format_expr(s.angle)})")
    elif isinstance(s, Scale):
        if s.uniform:
            out.append(f"{pad}scale({_format_target(s.target)}, {format_expr(s.factors[0])})")
        else:
            args = ", ".join(format_expr(f) for f in s.factors)
            out.append(f"{pad}scale({_format_target(s.target)}, {args})")
    elif isinstance(s, Extrude):
        out.append(f"{pad}extrude({s.solid}.face({format_expr(s.face)}), {format_expr(s.length)})")
    elif isinstance(s, Chamfer):
        ids = ", ".join(format_expr(e) for e in (s.prev, s.corner, s.next))
        out.append(f"{pad}chamfer({s.solid}, {ids}, {format_expr(s.radius)})")
    elif isinstance(s, Clamp):
        out.append(f"{pad}clamp({format_expr(s.lo)}, {format_expr(s.mid)}, {format_expr(s.hi)})")
    elif isinstance(s, Loop):
        out.append(f"{pad}for {s.var} in {format_expr(s.start)}..{format_expr(s.stop)}")
        for inner in s.body:
            _format_stmt(inner, indent + 1, out)
        out.append(f"{pad}end")
    else:
        raise TypeError(f"unknown statement {s!r}")


def pretty_print(program: Program) -> str:
    out: list[str] = []
    for p in program.params:
        out.append(f"param {p.name} = {repr(p.initial)}")
    for s in program.statements:
        _format_stmt(s, 0, out)
    return "\n".join(out) + "\n"


def strip_spans(program: Program) -> Program:
    """Structural copy with all spans zeroed, for tree equality checks."""

    def ex(e: Expr) -> Expr:
        if isinstance(e, Num):
            return Num(e.value)
        if isinstance(e, Name):
            return Name(e.ident)
        if isinstance(e, BinOp):
            return BinOp(e.op, ex(e.lhs), ex(e.rhs))
        if isinstance(e, UnaryNeg):
            return UnaryNeg(ex(e.operand))
        if isinstance(e, Call):
            return Call(e.func, tuple(ex(a) for a in e.args))
        if isinstance(e, VertRef):
            return VertRef(e.solid, ex(e.index), e.axis)
        raise TypeError(e)

    def st(s: Statement) -> Statement:
        if isinstance(s, Pragma):
            return Pragma(s.key, s.value)
        if isinstance(s, SolidDecl):
            return SolidDecl(s.name, s.primitive, tuple(ex(a) for a in s.args))
        if isinstance(s, LetDecl):
            return LetDecl(s.name, ex(s.expr))
        if isinstance(s, Translate):
            return Translate(tg(s.target), tuple(ex(d) for d in s.delta))
        if isinstance(s, Rotate):
            return Rotate(tg(s.target), s.axis, ex(s.angle))
        if isinstance(s, Scale):
            return Scale(tg(s.target), tuple(ex(f) for f in s.factors), s.uniform)
        if isinstance(s, Extrude):
            return Extrude(s.solid, ex(s.face), ex(s.length))
        if isinstance(s, Chamfer):
            return Chamfer(s.solid, ex(s.prev), ex(s.corner), ex(s.next), ex(s.radius))
        if isinstance(s, Clamp):
            return Clamp(ex(s.lo), ex(s.mid), ex(s.hi))
        if isinstance(s, Loop):
            return Loop(s.var, ex(s.start), ex(s.stop), tuple(st(b) for b in s.body))
        raise TypeError(s)

    def tg(t: Target) -> Target:
        return Target(t.solid, None if t.verts is None else tuple(ex(v) for v in t.verts))

    return Program(
        tuple(ParamDecl(p.name, p.initial) for p in program.params),
        tuple(st(s) for s in program.statements),
    )


# ---------------------------------------------------------------------------
# Validation


def _expr_structure_key(e: Expr):
    """Span-insensitive structural key, used to match clamped denominators."""
    if isinstance(e, Num):
        return ("num", e.value)
    if isinstance(e, Name):
        return ("name", e.ident)
    if isinstance(e, BinOp):
        return ("bin", e.op, _expr_structure_key(e.lhs), _expr_structure_key(e.rhs))
    if isinstance(e, UnaryNeg):
        return ("neg", _expr_structure_key(e.operand))
    if isinstance(e, Call):
        return ("call", e.func) + tuple(_expr_structure_key(a) for a in e.args)
    if isinstance(e, VertRef):
        return ("vert", e.solid, _expr_structure_key(e.index), e.axis)
    raise TypeError(e)


def _const_eval(e: Expr, params: dict[str, float], lets: dict[str, Optional[float]]) -> Optional[float]:
    """Evaluate an expression at initial parameter values; None if it needs geometry."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Name):
        if e.ident in params:
            return params[e.ident]
        return lets.get(e.ident)
    if isinstance(e, UnaryNeg):
        v = _const_eval(e.operand, params, lets)
        return None if v is None else -v
    if isinstance(e, BinOp):
        a = _const_eval(e.lhs, params, lets)
        b = _const_eval(e.rhs, params, lets)
        if a is None or b is None:
            return None
        try:
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            return a / b
        except ZeroDivisionError:
            return None
    if isinstance(e, Call):
        vals = [_const_eval(a, params, lets) for a in e.args]
        if any(v is None for v in vals):
            return None
        try:
            fn = {"sin": math.sin, "cos": math.cos, "sqrt": math.sqrt, "exp": math.exp, "log": math.log}
            if e.func in fn:
                return fn[e.func](vals[0])
            return math.pow(vals[0], vals[1])
        except ValueError:
            return None
    return None  # VertRef: needs interpretation


class _Validator:
    def __init__(self, program: Program):
        self.program = program
        self.diags: list[Diagnostic] = []
        self.params: dict[str, float] = {}
        self.lets: dict[str, Optional[float]] = {}
        self.solids: set[str] = set()
        self.loop_vars: list[str] = []
        # structural keys of expressions clamped away from zero
        self.bounded_away: set = set()

    def diag(self, severity: str, message: str, span: Span) -> None:
        self.diags.append(Diagnostic(severity, message, span.line, span.col))

    def run(self) -> list[Diagnostic]:
        seen: set[str] = set()
        for p in self.program.params:
            if p.name in seen:
                self.diag("error", f"duplicate parameter name '{p.name}'", p.span)
            seen.add(p.name)
            if not math.isfinite(p.initial):
                self.diag("error", f"parameter '{p.name}' initial value must be finite", p.span)
            self.params[p.name] = p.initial
        for stmt in self.program.statements:
            self.check_stmt(stmt)
        return self.diags

    # -- expression checks ---------------------------------------------------

    def check_scalar(self, e: Expr) -> None:
        if isinstance(e, Num):
            return
        if isinstance(e, Name):
            known = e.ident in self.params or e.ident in self.lets or e.ident in self.loop_vars
            if not known:
                self.diag("error", f"unknown identifier '{e.ident}'", e.span)
            return
        if isinstance(e, UnaryNeg):
            self.check_scalar(e.operand)
            return
        if isinstance(e, BinOp):
            self.check_scalar(e.lhs)
            self.check_scalar(e.rhs)
            if e.op == "/":
                key = _expr_structure_key(e.rhs)
                denom = _const_eval(e.rhs, self.params, self.lets)
                literal_nonzero = isinstance(e.rhs, Num) and e.rhs.value != 0
                if key not in self.bounded_away and not literal_nonzero:
                    self.diag(
                        "warning",
                        "division by an unclamped expression; wrap the denominator in a clamp "
                        "that bounds it away from zero",
                        e.span,
                    )
                if denom == 0:
                    self.diag("error", "division by zero at initial parameter values", e.span)
            return
        if isinstance(e, Call):
            for a in e.args:
                self.check_scalar(a)
            if e.func == "pow":
                exp = e.args[1]
                is_int_const = isinstance(exp, Num) and float(exp.value).is_integer()
                if not is_int_const:
                    self.diag(
                        "warning",
                        "pow with a non-integer-constant exponent requires a positive base at run time",
                        e.span,
                    )
            return
        if isinstance(e, VertRef):
            if e.solid not in self.solids:
                self.diag("error", f"unknown identifier '{e.solid}'", e.span)
            self.check_index(e.index, "vertex index")
            return
        raise TypeError(e)

    def check_index(self, e: Expr, what: str) -> None:
        """Index expressions must be compile-time integers: literals, loop vars, + - *."""
        if isinstance(e, Num):
            if not float(e.value).is_integer():
                self.diag("error", f"{what} must be an integer constant", e.span)
            return
        if isinstance(e, Name):
            if e.ident in self.loop_vars:
                return
            if e.ident in self.params or e.ident in self.lets:
                self.diag("error", f"{what} must be an integer constant, not a parameter or binding", e.span)
            else:
                self.diag("error", f"unknown identifier '{e.ident}'", e.span)
            return
        if isinstance(e, UnaryNeg):
            self.check_index(e.operand, what)
            return
        if isinstance(e, BinOp):
            if e.op == "/":
                self.diag("error", f"{what} must be an integer constant (no division)", e.span)
                return
            self.check_index(e.lhs, what)
            self.check_index(e.rhs, what)
            return
        self.diag("error", f"{what} must be an integer constant", e.span)

    # -- statement checks ----------------------------------------------------

    def check_target(self, t: Target) -> None:
        if t.solid not in self.solids:
            self.diag("error", f"unknown identifier '{t.solid}'", t.span)
        if t.verts is not None:
            for v in t.verts:
                self.check_index(v, "vertex index")

    def check_stmt(self, s: Statement) -> None:
        if isinstance(s, Pragma):
            if s.key != "epsilon":
                self.diag("warning", f"unknown pragma '{s.key}'", s.span)
            elif s.value <= 0:
                self.diag("error", "pragma epsilon must be positive", s.span)
        elif isinstance(s, SolidDecl):
            args = s.args
            if s.primitive == "cylinder":
                self.check_scalar(args[0])
                self.check_scalar(args[1])
                self.check_index(args[2], "cylinder side count")
            else:
                for a in args:
                    self.check_scalar(a)
            self.solids.add(s.name)
        elif isinstance(s, LetDecl):
            self.check_scalar(s.expr)
            self.lets[s.name] = _const_eval(s.expr, self.params, self.lets)
        elif isinstance(s, Translate):
            self.check_target(s.target)
            for d in s.delta:
                self.check_scalar(d)
        elif isinstance(s, Rotate):
            self.check_target(s.target)
            self.check_scalar(s.angle)
        elif isinstance(s, Scale):
            self.check_target(s.target)
            for f in s.factors:
                self.check_scalar(f)
        elif isinstance(s, Extrude):
            if s.solid not in self.solids:
                self.diag("error", f"unknown identifier '{s.solid}'", s.span)
            self.check_index(s.face, "face index")
            self.check_scalar(s.length)
        elif isinstance(s, Chamfer):
            if s.solid not in self.solids:
                self.diag("error", f"unknown identifier '{s.solid}'", s.span)
            for idx in (s.prev, s.corner, s.next):
                self.check_index(idx, "vertex index")
            self.check_scalar(s.radius)
        elif isinstance(s, Clamp):
            for e in (s.lo, s.mid, s.hi):
                self.check_scalar(e)
            lo = _const_eval(s.lo, self.params, self.lets)
            hi = _const_eval(s.hi, self.params, self.lets)
            if lo is not None and hi is not None and (lo > 0 or hi < 0):
                # the clamped band excludes zero: mid is safe as a denominator
                self.bounded_away.add(_expr_structure_key(s.mid))
        elif isinstance(s, Loop):
            self.check_index(s.start, "loop bound")
            self.check_index(s.stop, "loop bound")
            self.loop_vars.append(s.var)
            for inner in s.body:
                self.check_stmt(inner)
            self.loop_vars.pop()
        else:
            raise TypeError(s)


def validate(program: Program) -> list[Diagnostic]:
    """Static checks. Empty list iff the program satisfies all invariants.

    Diagnostics are data, ordered by traversal; errors make the program
    unsuitable for interpretation, warnings do not.
    """
    return _Validator(program).run()


def has_errors(diags: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diags)


def with_initial_values(program: Program, values) -> Program:
    """Copy of the program with parameter initial values replaced in order."""
    if len(values) != len(program.params):
        raise ValueError(f"expected {len(program.params)} values, got {len(values)}")
    params = tuple(
        ParamDecl(p.name, float(v), p.span, p.value_span)
        for p, v in zip(program.params, values)
    )
    return Program(params, program.statements)


def update_param_literals(text: str, values: dict[str, float]) -> str:
    """Rewrite the numeric literal of matching ``param`` lines, preserving
    all other formatting and comments."""
    program = parse(text)
    by_name = {p.name: p for p in program.params}
    lines = text.split("\n")
    for name, value in values.items():
        decl = by_name.get(name)
        if decl is None:
            raise KeyError(f"no parameter named '{name}'")
        lineno = decl.value_span.line - 1
        line = lines[lineno]
        col = decl.value_span.col - 1
        end = col
        while end < len(line) and line[end] in "+-.0123456789eE":
            end += 1
        lines[lineno] = line[:col] + repr(float(value)) + line[end:]
    return "\n".join(lines)
