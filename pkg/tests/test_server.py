import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from dcad.pipeline import bundled_model_path
from dcad.server import create_app

BOX = bundled_model_path("box").read_text()


@pytest.fixture
def client():
    return TestClient(create_app())


def make_session(client, text=BOX):
    response = client.post("/programs", json={"text": text})
    assert response.status_code == 200, response.text
    return response.json()


def test_create_program_returns_mesh(client):
    data = make_session(client)
    assert data["params"] == {"w": 1.0, "h": 1.0, "d": 1.0}
    assert len(data["mesh"]["vertices"]) == 24
    assert len(data["mesh"]["faces"]) == 6
    assert data["revision"] == 0
    assert data["mesh"]["v"] == 1


def test_create_program_syntax_error_422(client):
    response = client.post("/programs", json={"text": "solid b = box(\n"})
    assert response.status_code == 422
    body = response.json()
    assert body["diagnostics"][0]["line"] == 1


def test_create_program_validation_error_422(client):
    response = client.post("/programs", json={"text": "solid b = box(q, 1, 1)\n"})
    assert response.status_code == 422
    assert any("unknown identifier" in d["message"] for d in response.json()["diagnostics"])


def test_same_text_gives_fresh_identical_sessions(client):
    a = make_session(client)
    b = make_session(client)
    assert a["session"] != b["session"]
    assert a["mesh"] == b["mesh"]


def test_param_update_no_recompile(client):
    data = make_session(client)
    sid = data["session"]
    response = client.put(f"/programs/{sid}/params", json={"w": 3.0})
    assert response.status_code == 200
    body = response.json()
    assert body["revision"] == 0  # unchanged
    xs = body["mesh"]["vertices"][0::3]
    assert max(xs) == pytest.approx(1.5)
    assert "param w = 3.0" in body["text"]


def test_param_update_unknown_name_400(client):
    sid = make_session(client)["session"]
    response = client.put(f"/programs/{sid}/params", json={"nope": 1.0})
    assert response.status_code == 400


def test_text_update_bumps_revision(client):
    sid = make_session(client)["session"]
    response = client.put(
        f"/programs/{sid}", json={"text": BOX + "translate(b, 1.0, 0.0, 0.0)\n"}
    )
    assert response.status_code == 200
    body = response.json()
    assert body["revision"] == 1
    xs = body["mesh"]["vertices"][0::3]
    assert max(xs) == pytest.approx(1.5)


def test_unknown_session_404(client):
    assert client.get("/programs/nope").status_code == 404
    assert client.put("/programs/nope/params", json={"w": 1.0}).status_code == 404


def test_edit_identity_returns_single_option(client):
    sid = make_session(client)["session"]
    response = client.post(
        f"/programs/{sid}/edits",
        json={"moved": [{"vid": 7, "target": [0.5, 0.5, 0.5]}]},
    )
    assert response.status_code == 200
    body = response.json()
    assert len(body["options"]) == 1
    assert body["options"][0]["params"] == [1.0, 1.0, 1.0]
    assert body["edit"]["moved"][0]["vid"] == 7


def test_edit_invalid_vid_400(client):
    sid = make_session(client)["session"]
    response = client.post(
        f"/programs/{sid}/edits", json={"moved": [{"vid": 99, "target": [0, 0, 0]}]}
    )
    assert response.status_code == 400


def test_edit_stale_revision_409(client):
    sid = make_session(client)["session"]
    client.put(f"/programs/{sid}", json={"text": BOX + "scale(b, 2.0)\n"})
    response = client.post(
        f"/programs/{sid}/edits",
        json={"moved": [{"vid": 7, "target": [1.5, 0.5, 0.5]}], "revision": 0},
    )
    assert response.status_code == 409


def test_box_pull_select_updates_program_text(client):
    sid = make_session(client)["session"]
    response = client.post(
        f"/programs/{sid}/edits",
        json={"moved": [{"vid": 7, "target": [1.5, 0.5, 0.5]}], "revision": 0},
    )
    assert response.status_code == 200
    body = response.json()
    eid = body["edit_id"]
    best = body["options"][0]["params"]
    assert best[0] == pytest.approx(3.0, abs=1e-4)

    selected = client.post(f"/programs/{sid}/edits/{eid}/select", json={"option": 0})
    assert selected.status_code == 200
    state = selected.json()
    assert state["params"]["w"] == pytest.approx(3.0, abs=1e-4)
    assert "param w = 2.99" in state["text"] or "param w = 3.0" in state["text"]
    assert state["revision"] == 0  # structure untouched

    # GET mesh equals the option mesh
    fetched = client.get(f"/programs/{sid}").json()
    assert fetched["mesh"]["vertices"] == state["mesh"]["vertices"]

    # idempotent double select
    again = client.post(f"/programs/{sid}/edits/{eid}/select", json={"option": 0}).json()
    assert again["params"] == state["params"]

    # identity edit after select returns the applied parameters
    V = np.array(state["mesh"]["vertices"]).reshape(-1, 3)
    response = client.post(
        f"/programs/{sid}/edits",
        json={"moved": [{"vid": 7, "target": list(map(float, V[7]))}]},
    )
    body = response.json()
    assert len(body["options"]) == 1
    assert body["options"][0]["params"][0] == pytest.approx(state["params"]["w"], abs=1e-6)


def test_select_bad_index_400(client):
    sid = make_session(client)["session"]
    body = client.post(
        f"/programs/{sid}/edits", json={"moved": [{"vid": 7, "target": [0.5, 0.5, 0.5]}]}
    ).json()
    response = client.post(
        f"/programs/{sid}/edits/{body['edit_id']}/select", json={"option": 5}
    )
    assert response.status_code == 400


def test_async_202_and_poll():
    app = create_app(sync_wait_s=0.0)  # force the asynchronous path
    client = TestClient(app)
    sid = make_session(client)["session"]
    response = client.post(
        f"/programs/{sid}/edits", json={"moved": [{"vid": 7, "target": [1.5, 0.5, 0.5]}]}
    )
    assert response.status_code == 202
    poll = response.json()["poll"]
    deadline = time.time() + 30
    while time.time() < deadline:
        polled = client.get(poll)
        if polled.status_code == 200:
            body = polled.json()
            assert body["options"][0]["params"][0] == pytest.approx(3.0, abs=1e-4)
            break
        assert polled.status_code == 202
        time.sleep(0.05)
    else:
        pytest.fail("sync job never finished")


def test_mesh_never_violates_constraints(client):
    text = bundled_model_path("bracket").read_text()
    sid = make_session(client, text)["session"]
    body = client.post(
        f"/programs/{sid}/edits",
        json={"moved": [{"vid": 8, "target": [0.4, 0.2, 0.9]}]},
    ).json()
    from dcad import autodiff
    from tests.conftest import get_model

    bracket = get_model("bracket")
    for option in body["options"]:
        _, g = autodiff.eval_tape(bracket.tape, np.array(option["params"]))
        assert g.min() >= -1e-6


def test_session_dump(client):
    sid = make_session(client)["session"]
    client.post(
        f"/programs/{sid}/edits", json={"moved": [{"vid": 7, "target": [0.5, 0.5, 0.5]}]}
    )
    dump = client.get(f"/programs/{sid}/dump").json()
    assert dump["session"] == sid
    assert dump["params"] == {"w": 1.0, "h": 1.0, "d": 1.0}
    assert len(dump["edits"]) == 1


def test_session_ttl_eviction():
    app = create_app(session_ttl_s=0.0)
    client = TestClient(app)
    sid = make_session(client)["session"]
    time.sleep(0.01)
    assert client.get(f"/programs/{sid}").status_code == 404
