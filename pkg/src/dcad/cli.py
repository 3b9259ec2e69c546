"""Batch command-line interface.

Subcommands: ``eval`` (program -> OBJ + parameter manifest), ``sync``
(resolve a geometric edit into an option gallery), ``gradcheck`` (verify all
derivatives against finite differences), ``bench`` (timing and tape-size
table), ``serve`` (HTTP API). Exit codes: 0 ok, 1 user error, 2 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff, dsl, mesh, objectives, sync
from .checks import gradient_check, random_edit
from .objectives import ObjectiveConfig
from .pipeline import CompileError, CompiledModel, compile_file

EXIT_OK = 0
EXIT_USER = 1
EXIT_NUMERIC = 2


def _load_model(path: str) -> CompiledModel:
    try:
        return compile_file(path)
    except FileNotFoundError:
        raise SystemExit(_fail(f"no such file: {path}"))
    except dsl.SyntaxTreeError as exc:
        raise SystemExit(_fail(f"syntax error: {exc}"))
    except CompileError as exc:
        for d in exc.diagnostics:
            print(f"error: line {d.line}, col {d.col}: {d.message}", file=sys.stderr)
        raise SystemExit(EXIT_USER)


def _fail(message: str, code: int = EXIT_USER) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _parse_overrides(pairs: list[str]) -> dict[str, float]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(_fail(f"expected name=value, got '{pair}'"))
        name, value = pair.split("=", 1)
        try:
            out[name] = float(value)
        except ValueError:
            raise SystemExit(_fail(f"bad numeric value in '{pair}'"))
    return out


def _config_from_args(args) -> ObjectiveConfig:
    kwargs = {}
    if args.objectives:
        kwargs["objectives"] = tuple(args.objectives.split(","))
    if args.gamma:
        gamma = {}
        for pair in args.gamma:
            key, _, val = pair.partition("=")
            gamma[key] = float(val)
        kwargs["gamma"] = gamma
    try:
        return ObjectiveConfig(**kwargs).validated()
    except objectives.EditError as exc:
        raise SystemExit(_fail(str(exc)))


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    P = model.P0
    overrides = _parse_overrides(args.set or [])
    names = list(model.param_names)
    for name, value in overrides.items():
        if name not in names:
            return _fail(f"unknown parameter '{name}'")
        P[names.index(name)] = value
    try:
        V = model.positions(P)
    except autodiff.NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    out = Path(args.out or (Path(args.model).stem + ".obj"))
    out.write_text(mesh.export_obj(V, model.interp.topology.faces), encoding="utf-8")
    manifest = {
        "v": 1,
        "model": str(args.model),
        "params": model.params_dict(P),
        "vertices": model.interp.topology.n,
        "faces": len(model.interp.topology.faces),
        "instructions": model.tape.instruction_count,
    }
    manifest_path = out.with_suffix(".params.json")
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(f"wrote {out} and {manifest_path}")
    return EXIT_OK


def cmd_sync(args) -> int:
    model = _load_model(args.model)
    try:
        edit_doc = json.loads(Path(args.edit).read_text(encoding="utf-8"))
        edit, config = objectives.load_edit_document(json.dumps(edit_doc))
    except FileNotFoundError:
        return _fail(f"no such file: {args.edit}")
    except (json.JSONDecodeError, objectives.EditError, KeyError, ValueError) as exc:
        return _fail(f"bad edit document: {exc}")
    if args.objectives or args.gamma:
        config = _config_from_args(args)
    outdir = Path(args.out or "gallery")
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        gallery = sync.synchronize(
            model.tape, model.interp.topology, model.P0, edit, config, tol=args.tol
        )
    except objectives.EditError as exc:
        return _fail(str(exc))
    except autodiff.NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    manifest = gallery.to_json()
    manifest["model"] = str(args.model)
    for k, option in enumerate(gallery.options):
        obj_path = outdir / f"option_{k}.obj"
        obj_path.write_text(
            mesh.export_obj(option.V, model.interp.topology.faces), encoding="utf-8"
        )
        text = dsl.update_param_literals(
            model.text, dict(zip(model.param_names, option.P))
        )
        (outdir / f"option_{k}.dcad").write_text(text, encoding="utf-8")
    (outdir / "gallery.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(f"{len(gallery.options)} option(s) written to {outdir}")
    for record in gallery.runs:
        mark = "ok" if record.status in ("converged", "max_iter") else "failed"
        print(f"  {record.objective_id}: {record.status} ({mark})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = _load_model(args.model)
    report = gradient_check(
        model,
        seed=args.seed,
        n_points=args.points,
        tol=args.tol,
        label=str(args.model),
    )
    for entry in report.entries:
        status = "pass" if entry.passed else "FAIL"
        print(f"{entry.name:12s} max rel err {entry.max_error:.3e}  {status}")
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    model = _load_model(args.model)
    # compile_file interprets and lowers; re-run the stages to time them apart
    program = dsl.parse(model.text)
    from .interp import interpret

    t0 = time.perf_counter()
    result = interpret(program)
    t_interp = time.perf_counter() - t0
    t0 = time.perf_counter()
    tape = autodiff.lower(result.graph)
    t_lower = time.perf_counter() - t0

    config = _config_from_args(args)
    rng = np.random.default_rng(args.seed)
    V0 = model.positions()
    per_objective: dict[str, list[float]] = {oid: [] for oid in config.objectives}
    totals = []
    for _ in range(args.edits):
        edit = random_edit(model.interp.topology, V0, rng, n_moved=args.vertices)
        t_edit = 0.0
        for oid in config.objectives:
            single = ObjectiveConfig(objectives=(oid,), gamma=config.gamma)
            t0 = time.perf_counter()
            sync.synchronize(tape, model.interp.topology, model.P0, edit, single)
            dt = time.perf_counter() - t0
            per_objective[oid].append(dt)
            t_edit += dt
        totals.append(t_edit)
    table = {
        "v": 1,
        "model": str(args.model),
        "instructions": tape.instruction_count,
        "vertices": model.interp.topology.n,
        "params": tape.n_params,
        "constraints": tape.n_constraints,
        "interpret_s": round(t_interp, 6),
        "lower_s": round(t_lower, 6),
        "edits": args.edits,
        "edit_vertices": args.vertices,
        "seed": args.seed,
        "sync_mean_s": round(float(np.mean(totals)), 6) if totals else None,
        "sync_per_objective_s": {
            oid: round(float(np.mean(ts)), 6) if ts else None for oid, ts in per_objective.items()
        },
    }
    text = json.dumps(table, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a program to an OBJ mesh")
    p.add_argument("model")
    p.add_argument("--set", action="append", metavar="NAME=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sync", help="resolve a geometric edit into parameter options")
    p.add_argument("model")
    p.add_argument("edit")
    p.add_argument("--out")
    p.add_argument("--objectives")
    p.add_argument("--gamma", action="append", metavar="ID=VALUE")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(fn=cmd_sync)

    p = sub.add_parser("gradcheck", help="compare all gradients against finite differences")
    p.add_argument("model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="timing and tape-size table")
    p.add_argument("model")
    p.add_argument("--edits", type=int, default=10)
    p.add_argument("--vertices", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objectives")
    p.add_argument("--gamma", action="append", metavar="ID=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
