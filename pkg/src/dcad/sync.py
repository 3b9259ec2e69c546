"""Inverse-editing engine: run every enabled composed objective against an
edit, then gather, deduplicate, and rank the resulting option gallery.

Per-objective minimizations share the immutable tape and frozen start-point
data but own all mutable state, so they can run concurrently; results are
gathered in a fixed objective order before deduplication, which keeps the
gallery independent of execution order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff, mesh, objectives
from .autodiff import Tape
from .mesh import MeshTopology
from .objectives import (
    ALL_OBJECTIVES,
    EditSpec,
    EditError,
    ObjectiveConfig,
    PointEval,
    compose,
)
from .optimize import NLPProblem, OptResult, minimize

GALLERY_FEAS_TOL = 1e-6
DEDUP_THRESHOLD = 1e-3


@dataclass
class GalleryOption:
    objective_ids: tuple[str, ...]  # all objectives that merged into this option
    P: np.ndarray
    V: np.ndarray  # (n, 3)
    edit_value: float
    objective_value: float
    status: str
    iterations: int

    def to_json(self) -> dict:
        return {
            "objectives": list(self.objective_ids),
            "params": [float(p) for p in self.P],
            "edit_value": self.edit_value,
            "objective_value": self.objective_value,
            "status": self.status,
            "iterations": self.iterations,
        }


@dataclass
class RunRecord:
    objective_id: str
    status: str
    message: str = ""
    option_index: Optional[int] = None  # gallery option this run merged into

    def to_json(self) -> dict:
        return {
            "objective": self.objective_id,
            "status": self.status,
            "message": self.message,
            "option": self.option_index,
        }


@dataclass
class OptionGallery:
    options: list[GalleryOption]
    runs: list[RunRecord]
    warnings: list[str]
    P0: np.ndarray
    dedup_threshold: float = DEDUP_THRESHOLD

    def to_json(self) -> dict:
        return {
            "v": 1,
            "options": [o.to_json() for o in self.options],
            "runs": [r.to_json() for r in self.runs],
            "warnings": list(self.warnings),
            "start_params": [float(p) for p in self.P0],
        }


def relative_param_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L-infinity distance scaled by the larger parameter magnitude."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


class _PointCache:
    """Small per-problem memo of PointEvals so the objective, constraints,
    and line-search probes at one P share a single tape evaluation."""

    def __init__(self, tape: Tape):
        self.tape = tape
        self._store: dict[bytes, PointEval] = {}

    def at(self, P: np.ndarray) -> PointEval:
        key = np.asarray(P, dtype=float).tobytes()
        pe = self._store.get(key)
        if pe is None:
            if len(self._store) > 8:
                self._store.clear()
            pe = PointEval(self.tape, P)
            self._store[key] = pe
        return pe


def _solve_objective(
    tape: Tape,
    composed: objectives.ComposedObjective,
    P0: np.ndarray,
    tol: float,
    feas_tol: float,
    max_iter: int,
) -> OptResult:
    cache = _PointCache(tape)

    def obj(P):
        return composed.value_and_grad(cache.at(P))

    def obj_value(P):
        return composed.value(cache.at(P))

    def cons_block(P):
        pe = cache.at(P)
        _, Jg = pe.jacobians()
        return pe.constraints, Jg

    def cons_values(P):
        return cache.at(P).constraints

    problem = NLPProblem(
        objective=obj,
        P0=P0,
        tol=tol,
        feas_tol=feas_tol,
        max_iter=max_iter,
        constraint_block=cons_block if tape.n_constraints else None,
        constraint_values=cons_values if tape.n_constraints else None,
        objective_value=obj_value,
    )
    return minimize(problem)


def synchronize(
    tape: Tape,
    topology: MeshTopology,
    P0: np.ndarray,
    edit: EditSpec,
    config: Optional[ObjectiveConfig] = None,
    *,
    tol: float = 1e-6,
    feas_tol: float = 1e-8,
    max_iter: int = 200,
) -> OptionGallery:
    """Minimize each enabled composed objective under the model constraints
    and collect the distinct solutions, sorted by how well they satisfy the
    edit. Failed runs are reported in the gallery's run records."""
    config = (config or ObjectiveConfig()).validated()
    P0 = np.asarray(P0, dtype=float)
    warnings = edit.check(topology.n)

    V0_flat, _ = autodiff.eval_tape(tape, P0)
    V0 = V0_flat.reshape(-1, 3)
    weights = objectives.compute_weights(tape, topology, P0, edit)
    edit_energy = objectives.EditEnergy(edit, V0)

    enabled = [oid for oid in ALL_OBJECTIVES if oid in config.objectives]
    deform = None
    if any(oid in ("bh", "arap") for oid in enabled):
        deform = mesh.build_deformation_data(topology, V0)

    solved: list[tuple[str, OptResult, float, float]] = []
    runs: list[RunRecord] = []
    for oid in enabled:
        try:
            extra = objectives.build_energy(
                oid,
                edit=edit,
                weights=weights,
                topology=topology,
                V0=V0,
                P0=P0,
                config=config,
                deform=deform,
            )
            composed = compose(edit_energy, extra, config.gamma_for(oid))
            result = _solve_objective(tape, composed, P0, tol, feas_tol, max_iter)
        except (mesh.DegenerateVolume, autodiff.NumericError, ArithmeticError) as exc:
            runs.append(RunRecord(oid, "error", str(exc)))
            continue
        if result.status in ("infeasible", "numeric_failure"):
            runs.append(RunRecord(oid, result.status, result.message))
            continue
        try:
            pe = PointEval(tape, result.P)
            violation = (
                float(np.maximum(0.0, -pe.constraints).max()) if tape.n_constraints else 0.0
            )
            if violation > GALLERY_FEAS_TOL:
                runs.append(
                    RunRecord(oid, "infeasible", f"final violation {violation:.2e} above tolerance")
                )
                continue
            ev = edit_energy.value(pe)
            ov = composed.value(pe)
        except (mesh.DegenerateVolume, autodiff.NumericError, ArithmeticError) as exc:
            runs.append(RunRecord(oid, "error", str(exc)))
            continue
        solved.append((oid, result, ev, ov))
        runs.append(RunRecord(oid, result.status))

    solved.sort(key=lambda item: (item[2], ALL_OBJECTIVES.index(item[0])))
    options: list[GalleryOption] = []
    run_by_id = {r.objective_id: r for r in runs}
    for oid, result, ev, ov in solved:
        merged = None
        for idx, opt in enumerate(options):
            if relative_param_distance(opt.P, result.P) < DEDUP_THRESHOLD:
                merged = idx
                break
        if merged is not None:
            options[merged].objective_ids = options[merged].objective_ids + (oid,)
            run_by_id[oid].option_index = merged
            continue
        V_flat, _ = autodiff.eval_tape(tape, result.P)
        options.append(
            GalleryOption(
                objective_ids=(oid,),
                P=result.P,
                V=V_flat.reshape(-1, 3),
                edit_value=ev,
                objective_value=ov,
                status=result.status,
                iterations=result.iterations,
            )
        )
        run_by_id[oid].option_index = len(options) - 1
    return OptionGallery(options=options, runs=runs, warnings=warnings, P0=P0)


def apply_option(gallery: OptionGallery, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Select a gallery option: its parameters become the new start point for
    subsequent edits."""
    if index < 0 or index >= len(gallery.options):
        raise IndexError(f"option index {index} out of range (gallery has {len(gallery.options)})")
    opt = gallery.options[index]
    return opt.P.copy(), opt.V.copy()


def project_then_fit_baseline(
    tape: Tape,
    topology: MeshTopology,
    P0: np.ndarray,
    edit: EditSpec,
    *,
    tol: float = 1e-6,
    feas_tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Comparison baseline: smooth the edit over the free geometry first
    (constrained bi-Laplacian solve, ignoring the program), then chase those
    per-vertex targets with the edit objective alone."""
    P0 = np.asarray(P0, dtype=float)
    edit.check(topology.n)
    V0_flat, _ = autodiff.eval_tape(tape, P0)
    V0 = V0_flat.reshape(-1, 3)
    deform = mesh.build_deformation_data(topology, V0)

    moved_ids = np.array([vid for vid, _ in edit.moved], dtype=int)
    fixed_ids = np.array(edit.fixed, dtype=int)
    pinned = np.concatenate([moved_ids, fixed_ids]) if len(fixed_ids) else moved_ids
    disp = np.zeros((len(pinned), 3))
    if len(moved_ids):
        targets = np.array([t for _, t in edit.moved])
        disp[: len(moved_ids)] = targets - V0[moved_ids]
    D = mesh.solve_biharmonic_displacement(deform, pinned, disp)

    projected = V0 + D
    full_edit = EditSpec(
        moved=tuple((v, tuple(projected[v])) for v in range(topology.n)), fixed=()
    )
    full_energy = objectives.EditEnergy(full_edit, V0)
    composed = compose(full_energy, None, 0.0)
    result = _solve_objective(tape, composed, P0, tol, feas_tol, max_iter)
    return result.P
