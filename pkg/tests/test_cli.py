import json
from pathlib import Path

import numpy as np
import pytest

from dcad.cli import main
from dcad.pipeline import bundled_model_path


@pytest.fixture
def box_path():
    return str(bundled_model_path("box"))


def write_edit(tmp_path, doc):
    path = tmp_path / "edit.json"
    path.write_text(json.dumps(doc))
    return str(path)


def read_obj(path):
    verts = []
    faces = 0
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:]])
        elif line.startswith("f "):
            faces += 1
    return np.array(verts), faces


def test_eval_writes_obj_and_manifest(tmp_path, box_path):
    out = tmp_path / "box.obj"
    assert main(["eval", box_path, "--out", str(out)]) == 0
    verts, faces = read_obj(out)
    assert verts.shape == (8, 3)
    assert faces == 6
    manifest = json.loads(out.with_suffix(".params.json").read_text())
    assert manifest["params"] == {"w": 1.0, "h": 1.0, "d": 1.0}
    assert manifest["instructions"] > 0


def test_eval_with_override(tmp_path, box_path):
    out = tmp_path / "wide.obj"
    assert main(["eval", box_path, "--set", "w=3", "--out", str(out)]) == 0
    verts, _ = read_obj(out)
    assert verts[:, 0].max() == pytest.approx(1.5)


def test_eval_invalid_file_exit_code(tmp_path):
    bad = tmp_path / "bad.dcad"
    bad.write_text("solid b = box(\n")
    assert main(["eval", str(bad)]) == 1


def test_eval_unknown_param(tmp_path, box_path):
    assert main(["eval", box_path, "--set", "nope=3", "--out", str(tmp_path / "x.obj")]) == 1


def test_sync_identity_edit(tmp_path, box_path):
    edit = write_edit(
        tmp_path, {"v": 1, "moved": [{"vid": 7, "target": [0.5, 0.5, 0.5]}], "fixed": []}
    )
    outdir = tmp_path / "gallery"
    assert main(["sync", box_path, edit, "--out", str(outdir)]) == 0
    manifest = json.loads((outdir / "gallery.json").read_text())
    assert len(manifest["options"]) == 1
    assert np.allclose(manifest["options"][0]["params"], [1, 1, 1], atol=1e-9)
    assert (outdir / "option_0.obj").exists()
    assert "param w = 1.0" in (outdir / "option_0.dcad").read_text()


def test_sync_box_pull(tmp_path, box_path):
    edit = write_edit(
        tmp_path, {"v": 1, "moved": [{"vid": 7, "target": [1.5, 0.5, 0.5]}], "fixed": []}
    )
    outdir = tmp_path / "gallery"
    assert main(["sync", box_path, edit, "--out", str(outdir)]) == 0
    manifest = json.loads((outdir / "gallery.json").read_text())
    best = manifest["options"][0]["params"]
    assert best[0] == pytest.approx(3.0, abs=1e-4)
    text = (outdir / "option_0.dcad").read_text()
    assert "param w = 2.99" in text or "param w = 3.0" in text
    # the written program re-evaluates to the option mesh
    out2 = tmp_path / "reeval.obj"
    assert main(["eval", str(outdir / "option_0.dcad"), "--out", str(out2)]) == 0
    verts, _ = read_obj(out2)
    assert verts[:, 0].max() == pytest.approx(1.5, abs=1e-4)


def test_sync_bad_vid(tmp_path, box_path):
    edit = write_edit(
        tmp_path, {"v": 1, "moved": [{"vid": 99, "target": [0, 0, 0]}], "fixed": []}
    )
    assert main(["sync", box_path, edit, "--out", str(tmp_path / "g")]) == 1


def test_gradcheck_passes(box_path):
    assert main(["gradcheck", box_path, "--seed", "0", "--points", "2"]) == 0


def test_gradcheck_detects_tampering(monkeypatch, box_path):
    import dcad.objectives as obj

    original = obj.EditEnergy.value_and_grad

    def tampered(self, pe):
        value, grad = original(self, pe)
        return value, grad + 0.05
    monkeypatch.setattr(obj.EditEnergy, "value_and_grad", tampered)
    assert main(["gradcheck", box_path, "--seed", "0", "--points", "1"]) == 2


def test_gradcheck_constant_model(tmp_path):
    model = tmp_path / "const.dcad"
    model.write_text("param unused = 1.0\nsolid b = box(1.0, 1.0, 1.0)\n")
    assert main(["gradcheck", str(model), "--points", "2"]) == 0


def test_bench_zero_edits(tmp_path, box_path):
    out = tmp_path / "bench.json"
    assert main(["bench", box_path, "--edits", "0", "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert table["instructions"] > 0
    assert table["sync_mean_s"] is None
    assert set(table["sync_per_objective_s"]) == {"edit", "vtx", "edg", "par", "bh", "vol"}


def test_bench_layout_stable_across_seeds(tmp_path, box_path):
    tables = []
    for seed in (0, 1):
        out = tmp_path / f"bench{seed}.json"
        assert main(
            ["bench", box_path, "--edits", "1", "--vertices", "2", "--seed", str(seed), "--out", str(out)]
        ) == 0
        tables.append(json.loads(out.read_text()))
    assert set(tables[0]) == set(tables[1])
    assert tables[0]["instructions"] == tables[1]["instructions"]
