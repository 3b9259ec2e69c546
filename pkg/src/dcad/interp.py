"""Program interpreter: execute a CAD program into mesh topology, a
computation graph, vertex markers, and automatically emitted constraints.

Each operation adds scalar nodes to the graph and binds mesh vertices to
coordinate-node triples (markers). Topology (vertex count, ordering, faces)
depends only on program structure, never on parameter values; positions are
re-evaluated later through the lowered tape.

Vertex ids inside a program are solid-local slots: new vertices append, and
removed vertices (a chamfered corner) leave a tombstone so later indices
never shift. The finished mesh enumerates live slots of all solids in
creation order, which defines the global vertex ids used by edits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

from . import dsl
from .autodiff import Graph
from .mesh import MeshTopology, build_topology

DEFAULT_EPSILON = 1e-4


class InterpError(Exception):
    def __init__(self, message: str, span: dsl.Span = dsl.NO_SPAN):
        self.span = span
        if span.line:
            message = f"line {span.line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class VertexMarker:
    vid: int
    node_x: int
    node_y: int
    node_z: int


@dataclass(frozen=True)
class ConstraintRecord:
    node: int
    kind: str  # "auto" | "user-clamp"
    op: str  # originating operation
    description: str
    span: dsl.Span = dsl.NO_SPAN


@dataclass
class InterpResult:
    graph: Graph
    markers: list[VertexMarker]
    topology: MeshTopology
    constraints: list[ConstraintRecord]
    param_names: tuple[str, ...]
    initial_params: list[float]

    def positions(self) -> "np.ndarray":
        """Vertex positions at the traced parameter values, shape (n, 3)."""
        import numpy as np

        vals = self.graph.values
        return np.array([[vals[m.node_x], vals[m.node_y], vals[m.node_z]] for m in self.markers])


@dataclass
class _Solid:
    name: str
    slots: list[Optional[tuple[int, int, int]]] = field(default_factory=list)
    faces: list[list[int]] = field(default_factory=list)

    def live_slots(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s is not None]

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for face in self.faces:
            for i, a in enumerate(face):
                b = face[(i + 1) % len(face)]
                key = (a, b) if a < b else (b, a)
                counts[key] = counts.get(key, 0) + 1
        return counts


class _Interp:
    def __init__(self, program: dsl.Program):
        self.program = program
        self.graph = Graph()
        self.solids: dict[str, _Solid] = {}
        self.created: list[_Solid] = []
        self.params: dict[str, int] = {}
        self.lets: dict[str, int] = {}
        self.loop_vars: dict[str, int] = {}
        self.constraints: list[ConstraintRecord] = []
        self.epsilon = program.pragma("epsilon", DEFAULT_EPSILON)

    # -- expression evaluation ------------------------------------------------

    def scalar(self, e: dsl.Expr) -> int:
        g = self.graph
        if isinstance(e, dsl.Num):
            return g.const(e.value)
        if isinstance(e, dsl.Name):
            if e.ident in self.loop_vars:
                return g.const(float(self.loop_vars[e.ident]))
            if e.ident in self.lets:
                return self.lets[e.ident]
            if e.ident in self.params:
                return self.params[e.ident]
            raise InterpError(f"unknown identifier '{e.ident}'", e.span)
        if isinstance(e, dsl.UnaryNeg):
            return g.neg(self.scalar(e.operand))
        if isinstance(e, dsl.BinOp):
            lhs, rhs = self.scalar(e.lhs), self.scalar(e.rhs)
            return g.op({"+": 2, "-": 3, "*": 4, "/": 5}[e.op], lhs, rhs)
        if isinstance(e, dsl.Call):
            args = [self.scalar(a) for a in e.args]
            table = {"sin": g.sin, "cos": g.cos, "sqrt": g.sqrt, "exp": g.exp, "log": g.log}
            if e.func == "pow":
                return g.pow(args[0], args[1])
            return table[e.func](args[0])
        if isinstance(e, dsl.VertRef):
            solid = self.solid_of(e.solid, e.span)
            slot = self.index(e.index, e.span)
            nodes = self.live_slot(solid, slot, e.span)
            return nodes["xyz".index(e.axis)]
        raise TypeError(e)

    def index(self, e: dsl.Expr, span: dsl.Span) -> int:
        if isinstance(e, dsl.Num):
            if not float(e.value).is_integer():
                raise InterpError("index must be an integer constant", span)
            return int(e.value)
        if isinstance(e, dsl.Name):
            if e.ident in self.loop_vars:
                return self.loop_vars[e.ident]
            raise InterpError(f"index must be an integer constant, got '{e.ident}'", e.span)
        if isinstance(e, dsl.UnaryNeg):
            return -self.index(e.operand, span)
        if isinstance(e, dsl.BinOp):
            a, b = self.index(e.lhs, span), self.index(e.rhs, span)
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            raise InterpError("index expressions support only + - *", e.span)
        raise InterpError("index must be an integer constant", span)

    def solid_of(self, name: str, span: dsl.Span) -> _Solid:
        solid = self.solids.get(name)
        if solid is None:
            raise InterpError(f"undefined solid '{name}'", span)
        return solid

    def live_slot(self, solid: _Solid, slot: int, span: dsl.Span) -> tuple[int, int, int]:
        if slot < 0 or slot >= len(solid.slots):
            raise InterpError(
                f"vertex index {slot} out of range for solid '{solid.name}' "
                f"({len(solid.slots)} slots)",
                span,
            )
        nodes = solid.slots[slot]
        if nodes is None:
            raise InterpError(f"vertex {slot} of solid '{solid.name}' was removed", span)
        return nodes

    def target_slots(self, t: dsl.Target) -> tuple[_Solid, list[int]]:
        solid = self.solid_of(t.solid, t.span)
        if t.verts is None:
            return solid, solid.live_slots()
        ids = []
        for e in t.verts:
            slot = self.index(e, t.span)
            self.live_slot(solid, slot, t.span)
            ids.append(slot)
        return solid, ids

    # -- geometry helpers ------------------------------------------------------

    def edge_length(self, sa: tuple[int, int, int], sb: tuple[int, int, int]) -> int:
        g = self.graph
        total = None
        for na, nb in zip(sa, sb):
            d = g.sub(na, nb)
            sq = g.mul(d, d)
            total = sq if total is None else g.add(total, sq)
        return g.sqrt(total)

    def emit_constraint(self, node: int, kind: str, op: str, description: str, span: dsl.Span) -> None:
        self.constraints.append(ConstraintRecord(node, kind, op, description, span))

    # -- statements -------------------------------------------------------------

    def run(self) -> InterpResult:
        g = self.graph
        for slot, p in enumerate(self.program.params):
            self.params[p.name] = g.param(slot, p.initial)
        g.n_params = len(self.program.params)
        for stmt in self.program.statements:
            self.statement(stmt)
        return self.finalize()

    def statement(self, s: dsl.Statement) -> None:
        self.graph.origin = f"line {s.span.line}" if s.span.line else ""
        if isinstance(s, dsl.Pragma):
            return
        if isinstance(s, dsl.SolidDecl):
            self.solid_decl(s)
        elif isinstance(s, dsl.LetDecl):
            self.lets[s.name] = self.scalar(s.expr)
        elif isinstance(s, dsl.Translate):
            self.translate(s)
        elif isinstance(s, dsl.Rotate):
            self.rotate(s)
        elif isinstance(s, dsl.Scale):
            self.scale(s)
        elif isinstance(s, dsl.Extrude):
            self.extrude(s)
        elif isinstance(s, dsl.Chamfer):
            self.chamfer(s)
        elif isinstance(s, dsl.Clamp):
            self.clamp(s)
        elif isinstance(s, dsl.Loop):
            start = self.index(s.start, s.span)
            stop = self.index(s.stop, s.span)
            outer = self.loop_vars.get(s.var)
            for i in range(start, stop):
                self.loop_vars[s.var] = i
                for inner in s.body:
                    self.statement(inner)
            if outer is None:
                self.loop_vars.pop(s.var, None)
            else:
                self.loop_vars[s.var] = outer
        else:
            raise TypeError(s)

    def solid_decl(self, s: dsl.SolidDecl) -> None:
        g = self.graph
        solid = _Solid(s.name)
        if s.primitive == "box":
            w, h, d = (self.scalar(a) for a in s.args)
            half = g.const(0.5)
            hx, hy, hz = g.mul(w, half), g.mul(h, half), g.mul(d, half)
            nx, ny, nz = g.neg(hx), g.neg(hy), g.neg(hz)
            for i in range(8):
                solid.slots.append(
                    (hx if i & 1 else nx, hy if i & 2 else ny, hz if i & 4 else nz)
                )
            solid.faces = [
                [0, 2, 3, 1],  # 0: -z
                [4, 5, 7, 6],  # 1: +z
                [0, 1, 5, 4],  # 2: -y
                [3, 2, 6, 7],  # 3: +y
                [0, 4, 6, 2],  # 4: -x
                [1, 3, 7, 5],  # 5: +x
            ]
        elif s.primitive == "rect":
            w, h = (self.scalar(a) for a in s.args)
            half = g.const(0.5)
            hx, hy = g.mul(w, half), g.mul(h, half)
            nx, ny = g.neg(hx), g.neg(hy)
            z0 = g.const(0.0)
            solid.slots = [(nx, ny, z0), (hx, ny, z0), (hx, hy, z0), (nx, hy, z0)]
            solid.faces = [[0, 1, 2, 3]]  # normal +z
        elif s.primitive == "cylinder":
            r = self.scalar(s.args[0])
            h = self.scalar(s.args[1])
            n = self.index(s.args[2], s.span)
            if n < 3:
                raise InterpError("cylinder needs at least 3 sides", s.span)
            half = g.const(0.5)
            top = g.mul(h, half)
            bot = g.neg(top)
            for z in (bot, top):
                for j in range(n):
                    angle = 2.0 * math.pi * j / n
                    x = g.mul(r, g.const(math.cos(angle)))
                    y = g.mul(r, g.const(math.sin(angle)))
                    solid.slots.append((x, y, z))
            # faces 0..n-1: sides; face n: bottom cap; face n+1: top cap
            for j in range(n):
                k = (j + 1) % n
                solid.faces.append([j, k, n + k, n + j])
            solid.faces.append(list(range(n - 1, -1, -1)))
            solid.faces.append(list(range(n, 2 * n)))
        else:
            raise InterpError(f"unknown primitive '{s.primitive}'", s.span)
        self.solids[s.name] = solid
        self.created.append(solid)

    def translate(self, s: dsl.Translate) -> None:
        g = self.graph
        solid, slots = self.target_slots(s.target)
        dx, dy, dz = (self.scalar(d) for d in s.delta)
        for slot in slots:
            x, y, z = solid.slots[slot]
            solid.slots[slot] = (g.add(x, dx), g.add(y, dy), g.add(z, dz))

    def rotate(self, s: dsl.Rotate) -> None:
        g = self.graph
        solid, slots = self.target_slots(s.target)
        theta = self.scalar(s.angle)
        c, sn = g.cos(theta), g.sin(theta)
        for slot in slots:
            x, y, z = solid.slots[slot]
            if s.axis == "z":
                nx = g.sub(g.mul(x, c), g.mul(y, sn))
                ny = g.add(g.mul(x, sn), g.mul(y, c))
                solid.slots[slot] = (nx, ny, z)
            elif s.axis == "x":
                ny = g.sub(g.mul(y, c), g.mul(z, sn))
                nz = g.add(g.mul(y, sn), g.mul(z, c))
                solid.slots[slot] = (x, ny, nz)
            else:  # y
                nx = g.add(g.mul(x, c), g.mul(z, sn))
                nz = g.sub(g.mul(z, c), g.mul(x, sn))
                solid.slots[slot] = (nx, y, nz)

    def scale(self, s: dsl.Scale) -> None:
        g = self.graph
        solid, slots = self.target_slots(s.target)
        fx, fy, fz = (self.scalar(f) for f in s.factors)
        for slot in slots:
            x, y, z = solid.slots[slot]
            solid.slots[slot] = (g.mul(x, fx), g.mul(y, fy), g.mul(z, fz))

    def extrude(self, s: dsl.Extrude) -> None:
        g = self.graph
        solid = self.solid_of(s.solid, s.span)
        fidx = self.index(s.face, s.span)
        if fidx < 0 or fidx >= len(solid.faces):
            raise InterpError(
                f"face index {fidx} out of range for solid '{solid.name}' ({len(solid.faces)} faces)",
                s.span,
            )
        face = solid.faces[fidx]
        if len(face) < 3:
            raise InterpError("cannot extrude a degenerate face", s.span)
        length = self.scalar(s.length)

        # face normal from the first two boundary edges (faces are planar by
        # construction); normalized so the offset is length * unit normal
        p0, p1, p2 = (solid.slots[face[i]] for i in range(3))
        e1 = [g.sub(p1[i], p0[i]) for i in range(3)]
        e2 = [g.sub(p2[i], p1[i]) for i in range(3)]
        nx = g.sub(g.mul(e1[1], e2[2]), g.mul(e1[2], e2[1]))
        ny = g.sub(g.mul(e1[2], e2[0]), g.mul(e1[0], e2[2]))
        nz = g.sub(g.mul(e1[0], e2[1]), g.mul(e1[1], e2[0]))
        norm = g.sqrt(g.add(g.add(g.mul(nx, nx), g.mul(ny, ny)), g.mul(nz, nz)))
        unit = [g.div(nx, norm), g.div(ny, norm), g.div(nz, norm)]
        offset = [g.mul(u, length) for u in unit]

        gnode = g.sub(length, g.const(self.epsilon))
        self.emit_constraint(
            gnode, "auto", "extrude", f"extrude length - {self.epsilon:g} >= 0", s.span
        )

        edge_counts = solid.edge_use_counts()
        boundary_only = all(
            edge_counts[(min(a, b), max(a, b))] == 1
            for a, b in zip(face, face[1:] + face[:1])
        )

        new_slots = []
        for slot in face:
            x, y, z = solid.slots[slot]
            new_id = len(solid.slots)
            solid.slots.append((g.add(x, offset[0]), g.add(y, offset[1]), g.add(z, offset[2])))
            new_slots.append(new_id)
        solid.faces[fidx] = new_slots
        for i in range(len(face)):
            a, b = face[i], face[(i + 1) % len(face)]
            solid.faces.append([a, b, new_slots[(i + 1) % len(face)], new_slots[i]])
        if boundary_only:
            solid.faces.append(list(reversed(face)))

    def chamfer(self, s: dsl.Chamfer) -> None:
        g = self.graph
        solid = self.solid_of(s.solid, s.span)
        prev = self.index(s.prev, s.span)
        corner = self.index(s.corner, s.span)
        nxt = self.index(s.next, s.span)
        sp = self.live_slot(solid, prev, s.span)
        sc = self.live_slot(solid, corner, s.span)
        sn = self.live_slot(solid, nxt, s.span)
        edges = solid.edge_use_counts()
        for pair in ((prev, corner), (corner, nxt)):
            key = (min(pair), max(pair))
            if key not in edges:
                raise InterpError(
                    f"chamfer: ({pair[0]}, {pair[1]}) is not an edge of solid '{solid.name}'", s.span
                )
        radius = self.scalar(s.radius)

        len_prev = self.edge_length(sp, sc)
        len_next = self.edge_length(sn, sc)
        self.emit_constraint(
            g.sub(len_prev, radius), "auto", "chamfer",
            f"edge ({prev},{corner}) length - radius >= 0", s.span,
        )
        self.emit_constraint(
            g.sub(len_next, radius), "auto", "chamfer",
            f"edge ({corner},{nxt}) length - radius >= 0", s.span,
        )
        self.emit_constraint(
            g.sub(radius, g.const(self.epsilon)), "auto", "chamfer",
            f"chamfer radius - {self.epsilon:g} >= 0", s.span,
        )

        def slide(toward: tuple[int, int, int], length_node: int) -> tuple[int, int, int]:
            t = g.div(radius, length_node)
            return tuple(g.add(sc[i], g.mul(t, g.sub(toward[i], sc[i]))) for i in range(3))

        slot_a = len(solid.slots)
        solid.slots.append(slide(sp, len_prev))
        slot_b = len(solid.slots)
        solid.slots.append(slide(sn, len_next))
        solid.slots[corner] = None  # marker removed; nodes stay referencable

        for fi, face in enumerate(solid.faces):
            if corner not in face:
                continue
            pos = face.index(corner)
            p = face[pos - 1]
            q = face[(pos + 1) % len(face)]
            if p == prev and q == nxt:
                repl = [slot_a, slot_b]
            elif p == nxt and q == prev:
                repl = [slot_b, slot_a]
            else:
                raise InterpError(
                    "chamfer corner must sit between the two named edges in every face", s.span
                )
            solid.faces[fi] = face[:pos] + repl + face[pos + 1 :]

    def clamp(self, s: dsl.Clamp) -> None:
        g = self.graph
        lo, mid, hi = self.scalar(s.lo), self.scalar(s.mid), self.scalar(s.hi)
        if g.values[lo] >= g.values[hi]:
            raise InterpError(
                f"degenerate clamp band: lower bound {g.values[lo]:g} >= upper bound {g.values[hi]:g}",
                s.span,
            )
        self.emit_constraint(g.sub(mid, lo), "user-clamp", "clamp", "clamp: expr - lower >= 0", s.span)
        self.emit_constraint(g.sub(hi, mid), "user-clamp", "clamp", "clamp: upper - expr >= 0", s.span)

    # -- finalization -------------------------------------------------------------

    def finalize(self) -> InterpResult:
        markers: list[VertexMarker] = []
        global_faces: list[tuple[int, ...]] = []
        for solid in self.created:
            base: dict[int, int] = {}
            for slot in solid.live_slots():
                vid = len(markers)
                base[slot] = vid
                nx, ny, nz = solid.slots[slot]
                markers.append(VertexMarker(vid, nx, ny, nz))
            for face in solid.faces:
                global_faces.append(tuple(base[s] for s in face))
        topology = build_topology(len(markers), global_faces)
        g = self.graph
        g.vertex_outputs = [n for m in markers for n in (m.node_x, m.node_y, m.node_z)]
        g.constraint_outputs = [c.node for c in self.constraints]
        g.constraint_labels = [c.description for c in self.constraints]
        return InterpResult(
            graph=g,
            markers=markers,
            topology=topology,
            constraints=self.constraints,
            param_names=self.program.param_names,
            initial_params=self.program.initial_values(),
        )


def interpret(program: dsl.Program) -> InterpResult:
    """Execute a validated program. Raises InterpError on index/reference
    failures and ValueError if the program has validation errors."""
    diags = dsl.validate(program)
    if dsl.has_errors(diags):
        first = next(d for d in diags if d.severity == "error")
        raise ValueError(f"program has validation errors: {first.message} (line {first.line})")
    return _Interp(program).run()


# ---------------------------------------------------------------------------
# Operation catalog


@dataclass(frozen=True)
class OpInfo:
    name: str
    signature: str
    vertices: str
    faces: str
    constraints: str


OP_CATALOG: tuple[OpInfo, ...] = (
    OpInfo(
        "box",
        "solid s = box(w, h, d)",
        "8 vertices centered at the origin; slot i has x = +w/2 if bit 0 of i "
        "else -w/2, y by bit 1, z by bit 2 (slot 0 = (-w/2,-h/2,-d/2), slot 7 = (+w/2,+h/2,+d/2))",
        "6 quads, CCW outward: 0 -z, 1 +z, 2 -y, 3 +y, 4 -x, 5 +x",
        "none",
    ),
    OpInfo(
        "rect",
        "solid s = rect(w, h)",
        "4 vertices in the z=0 plane: (-w/2,-h/2), (+w/2,-h/2), (+w/2,+h/2), (-w/2,+h/2)",
        "1 quad (0,1,2,3) with +z normal",
        "none",
    ),
    OpInfo(
        "cylinder",
        "solid s = cylinder(r, h, n)  # n: integer constant",
        "2n vertices: bottom ring slots 0..n-1 at angle 2*pi*j/n, z=-h/2; top ring slots n..2n-1 at z=+h/2",
        "faces 0..n-1 side quads (j, j+1, n+j+1, n+j); face n bottom cap; face n+1 top cap",
        "none",
    ),
    OpInfo(
        "translate",
        "translate(s, dx, dy, dz) | translate(s.verts(i, ...), dx, dy, dz)",
        "coordinates of the targeted vertices get addition nodes; slots unchanged",
        "unchanged",
        "none",
    ),
    OpInfo(
        "rotate",
        "rotate(s, axis, theta) | rotate(s.verts(...), axis, theta)  # radians, about the origin",
        "targeted coordinates replaced by cos/sin combination nodes",
        "unchanged",
        "none",
    ),
    OpInfo(
        "scale",
        "scale(s, k) | scale(s, kx, ky, kz) | scale(s.verts(...), ...)  # about the origin",
        "targeted coordinates replaced by product nodes",
        "unchanged",
        "none",
    ),
    OpInfo(
        "extrude",
        "extrude(s.face(f), length)",
        "one new vertex per face vertex, offset by length along the face's unit normal; "
        "new slots append in face order",
        "face f rebound to the new vertices; one side quad per boundary edge appends; "
        "if every edge of f was unshared, the reversed original polygon appends as a cap",
        "1 auto: length - epsilon >= 0",
    ),
    OpInfo(
        "chamfer",
        "chamfer(s, i, j, k, r)  # cut corner j between edges (i,j) and (j,k)",
        "slot j is removed (tombstoned; indices never shift); two new vertices append: "
        "first slid r toward i, then r toward k",
        "every face containing j has j replaced by the two new vertices in boundary order",
        "3 auto: |edge ij| - r >= 0, |edge jk| - r >= 0, r - epsilon >= 0",
    ),
    OpInfo(
        "clamp",
        "clamp(lo, expr, hi)",
        "none",
        "none",
        "2 user: expr - lo >= 0, hi - expr >= 0; error if lo >= hi at the traced parameters",
    ),
    OpInfo(
        "loop",
        "for i in a..b ... end  # bounds: integer constants",
        "body replicated for i = a..b-1; i usable in indices and (as a constant) in scalars",
        "per body statements",
        "per body statements",
    ),
)


def op_catalog() -> tuple[OpInfo, ...]:
    """Description of each operation's vertex, face, and constraint effects,
    including the exact vertex ordering programs rely on for indexing."""
    return OP_CATALOG
