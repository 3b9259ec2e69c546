"""Session-oriented JSON-over-HTTP service for the bidirectional loop.

A session holds one compiled program plus its current parameters. Program
text updates recompile and bump the revision; parameter updates only
re-evaluate the tape. Geometric edits run the synchronization engine,
asynchronously when slow, and selected options write their parameters back
into the program text.

All payload schemas carry a ``v`` field. Per-session operations serialize
on a session lock; different sessions run concurrently.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import autodiff, dsl, mesh, objectives, sync
from .interp import InterpError
from .objectives import EditError, EditSpec, ObjectiveConfig
from .pipeline import CompileError, CompiledModel, compile_text

SESSION_TTL_S = 3600.0


class ProgramIn(BaseModel):
    text: str
    v: int = 1


class EditIn(BaseModel):
    moved: list[dict] = []
    fixed: list[int] = []
    objectives: Optional[list[str]] = None
    gamma: Optional[dict[str, float]] = None
    revision: Optional[int] = None
    v: int = 1


class SelectIn(BaseModel):
    option: int
    v: int = 1


@dataclass
class EditJob:
    edit_id: str
    status: str  # running | done | error
    edit: EditSpec
    gallery: Optional[sync.OptionGallery] = None
    error: str = ""


@dataclass
class Session:
    id: str
    model: CompiledModel
    P: np.ndarray
    revision: int = 0
    jobs: dict[str, EditJob] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    touched: float = field(default_factory=time.monotonic)

    def touch(self) -> None:
        self.touched = time.monotonic()


def _mesh_payload(model: CompiledModel, V: np.ndarray) -> dict:
    topo = model.interp.topology
    return {
        "v": 1,
        "vertices": [float(x) for x in np.asarray(V).ravel()],
        "faces": [list(map(int, f)) for f in topo.faces],
        "edges": [[int(a), int(b)] for a, b in topo.edges],
    }


def _session_payload(session: Session) -> dict:
    model = session.model
    V = model.positions(session.P)
    return {
        "v": 1,
        "session": session.id,
        "revision": session.revision,
        "text": model.text,
        "params": model.params_dict(session.P),
        "mesh": _mesh_payload(model, V),
        "constraints": list(model.tape.constraint_labels),
        "warnings": [d.to_json() for d in model.warnings],
    }


def _gallery_payload(job: EditJob, model: CompiledModel) -> dict:
    assert job.gallery is not None
    data = job.gallery.to_json()
    data["edit_id"] = job.edit_id
    data["edit"] = job.edit.to_json()
    for option, payload in zip(job.gallery.options, data["options"]):
        payload["vertices"] = [float(x) for x in option.V.ravel()]
    return data


def create_app(sync_wait_s: float = 1.0, session_ttl_s: float = SESSION_TTL_S) -> FastAPI:
    app = FastAPI(title="dcad", version="1")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    def evict_stale() -> None:
        now = time.monotonic()
        with registry_lock:
            for sid in [s for s, sess in sessions.items() if now - sess.touched > session_ttl_s]:
                del sessions[sid]

    def get_session(sid: str) -> Optional[Session]:
        evict_stale()
        with registry_lock:
            session = sessions.get(sid)
        if session is not None:
            session.touch()
        return session

    def error(status: int, message: str, **extra) -> JSONResponse:
        return JSONResponse({"v": 1, "error": message, **extra}, status_code=status)

    def compile_or_error(text: str):
        try:
            return compile_text(text), None
        except dsl.SyntaxTreeError as exc:
            diag = {"severity": "error", "message": exc.message, "line": exc.line, "col": exc.col}
            return None, error(422, "syntax error", diagnostics=[diag])
        except CompileError as exc:
            return None, error(
                422, "validation failed", diagnostics=[d.to_json() for d in exc.diagnostics]
            )
        except (InterpError, autodiff.NumericError, ValueError) as exc:
            return None, error(422, f"interpretation failed: {exc}", diagnostics=[])

    @app.post("/programs")
    def create_program(body: ProgramIn):
        model, err = compile_or_error(body.text)
        if err is not None:
            return err
        session = Session(id=uuid.uuid4().hex, model=model, P=model.P0)
        with registry_lock:
            sessions[session.id] = session
        return _session_payload(session)

    @app.get("/programs/{sid}")
    def get_program(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        with session.lock:
            return _session_payload(session)

    @app.put("/programs/{sid}")
    def update_program(sid: str, body: ProgramIn):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        model, err = compile_or_error(body.text)
        if err is not None:
            return err
        with session.lock:
            session.model = model
            session.P = model.P0
            session.revision += 1
            session.jobs.clear()
            return _session_payload(session)

    @app.put("/programs/{sid}/params")
    def update_params(sid: str, body: dict[str, float]):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        with session.lock:
            names = list(session.model.param_names)
            P = session.P.copy()
            for name, value in body.items():
                if name == "v":
                    continue
                if name not in names:
                    return error(400, f"unknown parameter '{name}'")
                P[names.index(name)] = float(value)
            try:
                V = session.model.positions(P)
            except autodiff.NumericError as exc:
                return error(400, f"parameters not evaluable: {exc}")
            session.P = P
            text = dsl.update_param_literals(
                session.model.text, session.model.params_dict(P)
            )
            session.model.text = text
            return _session_payload(session)

    @app.post("/programs/{sid}/edits")
    def create_edit(sid: str, body: EditIn):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        if body.revision is not None and body.revision != session.revision:
            return error(
                409,
                "program changed since this edit was prepared; recompile first",
                revision=session.revision,
            )
        try:
            edit = EditSpec.from_json({"moved": body.moved, "fixed": body.fixed})
            edit.check(session.model.interp.topology.n)
            config = ObjectiveConfig.from_json(
                {
                    "objectives": body.objectives or list(objectives.DEFAULT_OBJECTIVES),
                    "gamma": body.gamma or {},
                }
            )
        except (EditError, KeyError, ValueError, TypeError) as exc:
            return error(400, f"invalid edit: {exc}")

        job = EditJob(edit_id=uuid.uuid4().hex, status="running", edit=edit)
        with session.lock:
            session.jobs[job.edit_id] = job
        model, P = session.model, session.P.copy()

        def run() -> None:
            try:
                gallery = sync.synchronize(
                    model.tape, model.interp.topology, P, edit, config
                )
                job.gallery = gallery
                job.status = "done"
            except Exception as exc:  # surfaced to the client on poll
                job.status = "error"
                job.error = str(exc)

        worker = threading.Thread(target=run, daemon=True)
        worker.start()
        worker.join(timeout=sync_wait_s)
        if job.status == "done":
            return _gallery_payload(job, model)
        if job.status == "error":
            return error(500, f"synchronization failed: {job.error}")
        return JSONResponse(
            {
                "v": 1,
                "edit_id": job.edit_id,
                "status": "running",
                "poll": f"/programs/{sid}/edits/{job.edit_id}",
            },
            status_code=202,
        )

    @app.get("/programs/{sid}/edits/{eid}")
    def get_edit(sid: str, eid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        job = session.jobs.get(eid)
        if job is None:
            return error(404, "unknown edit")
        if job.status == "running":
            return JSONResponse(
                {"v": 1, "edit_id": eid, "status": "running"}, status_code=202
            )
        if job.status == "error":
            return error(500, f"synchronization failed: {job.error}")
        return _gallery_payload(job, session.model)

    @app.post("/programs/{sid}/edits/{eid}/select")
    def select_option(sid: str, eid: str, body: SelectIn):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        job = session.jobs.get(eid)
        if job is None or job.status != "done":
            return error(404, "unknown or unfinished edit")
        try:
            P, V = sync.apply_option(job.gallery, body.option)
        except IndexError as exc:
            return error(400, str(exc))
        with session.lock:
            session.P = P
            session.model.text = dsl.update_param_literals(
                session.model.text, session.model.params_dict(P)
            )
            payload = _session_payload(session)
        payload["edit_id"] = eid
        payload["option"] = body.option
        return payload

    @app.get("/programs/{sid}/dump")
    def dump_session(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        with session.lock:
            return {
                "v": 1,
                "session": session.id,
                "revision": session.revision,
                "text": session.model.text,
                "params": session.model.params_dict(session.P),
                "edits": {
                    eid: {
                        "status": job.status,
                        "options": len(job.gallery.options) if job.gallery else 0,
                    }
                    for eid, job in session.jobs.items()
                },
            }

    return app
