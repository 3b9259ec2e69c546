import math

import numpy as np
import pytest

from dcad import autodiff, dsl
from dcad.interp import InterpError, interpret, op_catalog


def run(text):
    return interpret(dsl.parse(text))


def positions(result):
    return result.positions()


def test_box_semantics():
    r = run("solid b = box(2.0, 2.0, 2.0)\n")
    V = positions(r)
    assert V.shape == (8, 3)
    assert sorted(map(tuple, np.sign(V))) == sorted(
        [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    )
    assert np.allclose(np.abs(V), 1.0)
    assert len(r.topology.faces) == 6
    assert all(len(f) == 4 for f in r.topology.faces)
    assert r.constraints == []


def test_box_outward_orientation():
    r = run("solid b = box(2.0, 2.0, 2.0)\n")
    V = positions(r)
    for face in r.topology.faces:
        a, b, c = V[face[0]], V[face[1]], V[face[2]]
        normal = np.cross(b - a, c - b)
        center = V[list(face)].mean(axis=0)
        assert np.dot(normal, center) > 0  # normal points away from the origin


def test_cylinder_ring_layout():
    r = run("solid c = cylinder(1.0, 1.0, 4)\n")
    V = positions(r)
    assert V.shape == (8, 3)
    for j in range(4):
        angle = 2 * math.pi * j / 4
        assert np.allclose(V[j], [math.cos(angle), math.sin(angle), -0.5], atol=1e-12)
        assert np.allclose(V[4 + j], [math.cos(angle), math.sin(angle), 0.5], atol=1e-12)
    assert len(r.topology.faces) == 6  # 4 sides + 2 caps


def test_extrude_on_box_face():
    r = run("param len = 0.5\nsolid b = box(1.0, 1.0, 1.0)\nextrude(b.face(3), len)\n")
    assert r.topology.n == 12  # 4 new vertices
    assert len(r.constraints) == 1
    record = r.constraints[0]
    assert record.kind == "auto"
    assert record.op == "extrude"
    # constraint value = len - epsilon
    assert r.graph.values[record.node] == pytest.approx(0.5 - 1e-4, abs=1e-15)
    # the extruded face moved along +y by len
    V = positions(r)
    assert V[:, 1].max() == pytest.approx(1.0, abs=1e-12)


def test_extrude_open_profile_adds_cap():
    r = run("solid p = rect(2.0, 1.0)\nextrude(p.face(0), 1.0)\n")
    # closed prism: 8 verts, 1 top + 4 sides + 1 bottom
    assert r.topology.n == 8
    assert len(r.topology.faces) == 6
    V = positions(r)
    from dcad.mesh import signed_volume

    assert signed_volume(r.topology.tris, V) == pytest.approx(2.0, abs=1e-12)


def test_chamfer_replaces_corner():
    r = run("param r = 0.25\nsolid p = rect(2.0, 1.0)\nchamfer(p, 0, 1, 2, r)\n")
    assert r.topology.n == 5  # corner replaced by two vertices
    assert len(r.topology.faces) == 1
    assert len(r.topology.faces[0]) == 5
    assert len(r.constraints) == 3
    values = [r.graph.values[c.node] for c in r.constraints]
    # edge (0,1) has length 2, edge (1,2) length 1
    assert values[0] == pytest.approx(2.0 - 0.25, abs=1e-12)
    assert values[1] == pytest.approx(1.0 - 0.25, abs=1e-12)
    assert values[2] == pytest.approx(0.25 - 1e-4, abs=1e-12)
    V = positions(r)
    # new vertices sit r away from the old corner (1, -0.5) along both edges
    assert np.allclose(V[3], [1 - 0.25, -0.5, 0.0], atol=1e-12)
    assert np.allclose(V[4], [1.0, -0.5 + 0.25, 0.0], atol=1e-12)


def test_chamfer_marker_removed_but_nodes_remain():
    r = run("param r = 0.2\nsolid p = rect(2.0, 1.0)\nchamfer(p, 0, 1, 2, r)\n")
    # 5 markers, bijective with live vertex ids
    assert [m.vid for m in r.markers] == list(range(5))
    # referencing the removed slot is an error
    with pytest.raises(InterpError, match="removed"):
        run(
            "param r = 0.2\nsolid p = rect(2.0, 1.0)\nchamfer(p, 0, 1, 2, r)\n"
            "translate(p.verts(1), 1.0, 0.0, 0.0)\n"
        )


def test_chamfer_requires_real_edges():
    with pytest.raises(InterpError, match="not an edge"):
        run("param r = 0.2\nsolid p = rect(2.0, 1.0)\nchamfer(p, 0, 2, 3, r)\n")


def test_clamp_emits_two_records():
    r = run("param w = 4.0\nparam h = 2.0\nclamp(0.5, w / h, 4.0)\n")
    assert len(r.constraints) == 2
    assert [c.kind for c in r.constraints] == ["user-clamp", "user-clamp"]
    assert r.graph.values[r.constraints[0].node] == pytest.approx(1.5)
    assert r.graph.values[r.constraints[1].node] == pytest.approx(2.0)


def test_clamp_boundary_feasible():
    r = run("param p = 0.0\nclamp(0, p, 1)\n")
    assert r.graph.values[r.constraints[0].node] == 0.0


def test_clamp_degenerate_band():
    with pytest.raises(InterpError, match="degenerate"):
        run("param p = 0.5\nclamp(1, p, 0)\n")


def test_scale_and_rotate_node_structure():
    r = run("param s = 2.0\nsolid b = box(1.0, 1.0, 1.0)\nscale(b, s)\n")
    g = r.graph
    for m in r.markers:
        assert g.kinds[m.node_x] == autodiff.MUL
    r2 = run("param t = 0.3\nsolid b = box(1.0, 1.0, 1.0)\nrotate(b, z, t)\n")
    V = positions(r2)
    c, s = math.cos(0.3), math.sin(0.3)
    assert np.allclose(V[7][:2], [0.5 * c - 0.5 * s, 0.5 * s + 0.5 * c], atol=1e-12)


def test_vertex_selection_transform():
    r = run("solid b = box(1.0, 1.0, 1.0)\ntranslate(b.verts(4, 5, 6, 7), 0.0, 0.0, 1.0)\n")
    V = positions(r)
    assert np.allclose(V[4:, 2], 1.5)
    assert np.allclose(V[:4, 2], -0.5)


def test_vertex_coordinate_reference():
    r = run("solid b = box(2.0, 1.0, 1.0)\nlet cx = b.vert(7).x\nsolid c = box(cx, cx, cx)\n")
    V = positions(r)
    assert np.allclose(V[8:].max(axis=0), 0.5)  # second box is 1x1x1


def test_loop_replication_and_loop_var():
    r = run(
        "for i in 0..3\n    solid b = box(1.0, 1.0, 1.0)\n"
        "    translate(b, i * 2.0, 0.0, 0.0)\nend\n"
    )
    assert r.topology.n == 24
    V = positions(r)
    assert sorted(set(np.round(V[:, 0], 6))) == [-0.5, 0.5, 1.5, 2.5, 3.5, 4.5]


def test_index_out_of_range():
    with pytest.raises(InterpError, match="out of range"):
        run("solid b = box(1.0, 1.0, 1.0)\ntranslate(b.verts(9), 1.0, 0.0, 0.0)\n")
    with pytest.raises(InterpError, match="out of range"):
        run("solid b = box(1.0, 1.0, 1.0)\nextrude(b.face(6), 1.0)\n")


def test_interpret_requires_valid_program():
    with pytest.raises(ValueError, match="validation"):
        run("solid b = box(q, 1.0, 1.0)\n")


def test_epsilon_pragma_overrides_default():
    r = run("pragma epsilon = 0.01\nparam len = 0.5\nsolid b = box(1.0, 1.0, 1.0)\nextrude(b.face(1), len)\n")
    assert r.graph.values[r.constraints[0].node] == pytest.approx(0.5 - 0.01, abs=1e-15)


def test_interpret_deterministic(any_model):
    a = interpret(any_model.program)
    b = interpret(any_model.program)
    assert [m.vid for m in a.markers] == [m.vid for m in b.markers]
    assert a.topology.faces == b.topology.faces
    assert np.array_equal(a.topology.edges, b.topology.edges)
    assert a.graph.vertex_outputs == b.graph.vertex_outputs
    assert a.graph.constraint_outputs == b.graph.constraint_outputs


def test_marker_soundness(any_model):
    r = any_model.interp
    values = autodiff.eval_graph(r.graph, any_model.P0)
    traced = r.positions()
    replayed = np.array(
        [[values[m.node_x], values[m.node_y], values[m.node_z]] for m in r.markers]
    )
    assert np.max(np.abs(traced - replayed)) <= 1e-12


def test_constraint_completeness(any_model):
    text = any_model.text
    program = any_model.program

    def count(kind):
        n = 0

        def walk(statements):
            nonlocal n
            for s in statements:
                if isinstance(s, kind):
                    n += 1
                if isinstance(s, dsl.Loop):
                    walk(s.body)

        walk(program.statements)
        return n

    # loops in bundled models replicate solids, not constraint ops
    expected = count(dsl.Extrude) + 3 * count(dsl.Chamfer) + 2 * count(dsl.Clamp)
    assert len(any_model.interp.constraints) == expected


def test_op_catalog_entries():
    catalog = {info.name: info for info in op_catalog()}
    for name in ("box", "rect", "cylinder", "translate", "rotate", "scale", "extrude", "chamfer", "clamp", "loop"):
        assert name in catalog
        info = catalog[name]
        assert info.signature and info.vertices and info.constraints
    assert "slot 0" in catalog["box"].vertices  # ordering documented
