import json
import threading

import numpy as np
import pytest

from dcad import autodiff, mesh, sync
from dcad.objectives import (
    BiharmonicEnergy,
    EditError,
    EditSpec,
    ObjectiveConfig,
    PointEval,
)
from dcad.sync import (
    apply_option,
    project_then_fit_baseline,
    relative_param_distance,
    synchronize,
)


def identity_edit(model, vids):
    V0 = model.positions()
    return EditSpec(moved=tuple((v, tuple(map(float, V0[v]))) for v in vids))


def test_identity_edit_single_merged_option(box):
    edit = identity_edit(box, [7, 2])
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit)
    assert len(gallery.options) == 1
    option = gallery.options[0]
    assert np.allclose(option.P, box.P0, atol=1e-9)
    assert set(option.objective_ids) == set(ObjectiveConfig().objectives)
    assert option.edit_value <= 1e-12


def test_box_corner_pull_unambiguous(box):
    edit = EditSpec(moved=((7, (1.5, 0.5, 0.5)),))
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit)
    assert len(gallery.options) == 1
    P = gallery.options[0].P
    assert P[0] == pytest.approx(3.0, abs=1e-4)
    assert P[1] == pytest.approx(1.0, abs=1e-3)
    assert P[2] == pytest.approx(1.0, abs=1e-3)


def test_gallery_sorted_and_feasible(bracket):
    V0 = bracket.positions()
    edit = EditSpec(moved=((8, (float(V0[8, 0] + 0.2), float(V0[8, 1]), float(V0[8, 2]))),))
    gallery = synchronize(bracket.tape, bracket.interp.topology, bracket.P0, edit)
    values = [o.edit_value for o in gallery.options]
    assert values == sorted(values)
    for option in gallery.options:
        _, g = autodiff.eval_tape(bracket.tape, option.P)
        assert g.min() >= -1e-6


def test_every_run_is_recorded(box):
    edit = EditSpec(moved=((7, (1.5, 0.5, 0.5)),))
    config = ObjectiveConfig(objectives=("edit", "vtx", "bh"))
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit, config)
    assert [r.objective_id for r in gallery.runs] == ["edit", "vtx", "bh"]
    for record in gallery.runs:
        assert record.option_index is not None or record.status not in ("converged", "max_iter")


def test_edit_errors():
    from tests.conftest import get_model

    box = get_model("box")
    with pytest.raises(EditError):
        synchronize(box.tape, box.interp.topology, box.P0, EditSpec(moved=()))
    with pytest.raises(EditError):
        synchronize(
            box.tape, box.interp.topology, box.P0, EditSpec(moved=((42, (0, 0, 0)),))
        )


def test_full_specification_warns_not_errors(box):
    V0 = box.positions()
    edit = EditSpec(moved=tuple((v, tuple(map(float, V0[v]))) for v in range(8)))
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit)
    assert gallery.warnings
    assert len(gallery.options) >= 1


def test_static_topology_across_options(dresser):
    V0 = dresser.positions()
    zmax = V0[:, 2].max()
    top = [int(i) for i in np.where(np.abs(V0[:, 2] - zmax) < 1e-9)[0]]
    edit = EditSpec(
        moved=tuple((v, (float(V0[v, 0]), float(V0[v, 1]), float(V0[v, 2] + 0.4))) for v in top)
    )
    gallery = synchronize(dresser.tape, dresser.interp.topology, dresser.P0, edit)
    shapes = {o.V.shape for o in gallery.options}
    assert shapes == {(dresser.interp.topology.n, 3)}


def test_apply_option_roundtrip(box):
    edit = EditSpec(moved=((7, (1.5, 0.5, 0.5)),))
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit)
    P, V = apply_option(gallery, 0)
    assert V.shape == (8, 3)
    assert V[7][0] == pytest.approx(1.5, abs=1e-4)
    # re-synchronizing from the applied parameters with an identity edit
    # returns the applied parameters as the sole option
    V_now = box.positions(P)
    edit2 = EditSpec(moved=((7, tuple(map(float, V_now[7]))),))
    gallery2 = synchronize(box.tape, box.interp.topology, P, edit2)
    assert len(gallery2.options) == 1
    assert np.allclose(gallery2.options[0].P, P, atol=1e-9)
    with pytest.raises(IndexError):
        apply_option(gallery, 99)


def test_gallery_serialization(box):
    edit = EditSpec(moved=((7, (1.5, 0.5, 0.5)),))
    gallery = synchronize(box.tape, box.interp.topology, box.P0, edit)
    data = gallery.to_json()
    text = json.dumps(data)
    parsed = json.loads(text)
    assert parsed["v"] == 1
    assert len(parsed["options"]) == len(gallery.options)
    assert parsed["options"][0]["params"][0] == pytest.approx(3.0, abs=1e-4)
    assert {r["objective"] for r in parsed["runs"]} == set(ObjectiveConfig().objectives)


def test_relative_param_distance_properties():
    a = np.array([1.0, 2.0, 3.0])
    assert relative_param_distance(a, a) == 0.0
    b = np.array([1.0, 2.0, 3.3])
    assert relative_param_distance(a, b) == pytest.approx(0.3 / 3.3)
    assert relative_param_distance(a, b) == relative_param_distance(b, a)


def test_project_then_fit_identity(coupled_cylinder):
    m = coupled_cylinder
    edit = identity_edit(m, [0, 1, 2])
    P = project_then_fit_baseline(m.tape, m.interp.topology, m.P0, edit)
    assert np.allclose(P, m.P0, atol=1e-6)


def test_project_then_fit_reproduces_targets_at_pins(coupled_cylinder):
    m = coupled_cylinder
    topo = m.interp.topology
    V0 = m.positions()
    deform = mesh.build_deformation_data(topo, V0)
    moved = list(range(32, 40))
    disp = np.zeros((len(moved), 3))
    disp[:, 0] = 0.5
    D = mesh.solve_biharmonic_displacement(deform, np.array(moved), disp)
    assert np.allclose(D[moved], disp, atol=1e-9)


def test_parameter_space_beats_projection(coupled_cylinder):
    m = coupled_cylinder
    topo = m.interp.topology
    V0 = m.positions()
    top_ring = list(range(32, 40))
    bottom_ring = list(range(8))
    edit = EditSpec(
        moved=tuple(
            (v, (float(V0[v, 0] + 0.5), float(V0[v, 1]), float(V0[v, 2]))) for v in top_ring
        ),
        fixed=tuple(bottom_ring),
    )
    gallery = synchronize(m.tape, topo, m.P0, edit, ObjectiveConfig(objectives=("bh",)))
    P_direct = gallery.options[0].P
    P_base = project_then_fit_baseline(m.tape, topo, m.P0, edit)
    deform = mesh.build_deformation_data(topo, V0)
    bh = BiharmonicEnergy(deform, V0)
    e_direct = bh.value(PointEval(m.tape, P_direct))
    e_base = bh.value(PointEval(m.tape, P_base))
    assert e_direct < 0.8 * e_base


def test_concurrent_synchronize_matches_sequential(box):
    edit = EditSpec(moved=((7, (1.3, 0.5, 0.5)),))
    config = ObjectiveConfig(objectives=("edit", "vtx", "vol"))
    sequential = synchronize(box.tape, box.interp.topology, box.P0, edit, config)

    results = {}

    def run(key):
        results[key] = synchronize(box.tape, box.interp.topology, box.P0, edit, config)

    threads = [threading.Thread(target=run, args=(k,)) for k in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for gallery in results.values():
        assert len(gallery.options) == len(sequential.options)
        for a, b in zip(gallery.options, sequential.options):
            assert np.array_equal(a.P, b.P)
