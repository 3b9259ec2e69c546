"""Derivative verification and randomized-edit helpers.

The gradient check compares every energy's reverse-mode gradient and every
constraint's gradient row against central finite differences at random
feasible parameter points; it is both a CLI command and the backbone of the
acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff, mesh, objectives
from .objectives import ALL_OBJECTIVES, EditSpec, ObjectiveConfig, PointEval
from .pipeline import CompiledModel

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def gradient_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """Relative error between gradient vectors with an absolute floor."""
    scale = max(1.0, float(np.max(np.abs(g_ad))), float(np.max(np.abs(g_fd))))
    return float(np.max(np.abs(g_ad - g_fd))) / scale


def random_edit(
    topology: mesh.MeshTopology,
    V0: np.ndarray,
    rng: np.random.Generator,
    n_moved: int,
    magnitude: float = 0.05,
    n_fixed: int = 0,
) -> EditSpec:
    """Pick vertices uniformly and displace each by a random direction whose
    length is ``magnitude`` times the bounding-box diagonal."""
    n = topology.n
    count = min(n_moved + n_fixed, n - 1)
    ids = rng.choice(n, size=count, replace=False)
    diag = float(np.linalg.norm(V0.max(axis=0) - V0.min(axis=0)))
    moved = []
    for vid in ids[:n_moved]:
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        target = V0[vid] + magnitude * diag * direction
        moved.append((int(vid), (float(target[0]), float(target[1]), float(target[2]))))
    fixed = tuple(int(v) for v in ids[n_moved:])
    return EditSpec(tuple(moved), fixed)


def random_feasible_point(
    model: CompiledModel, rng: np.random.Generator, scale: float = 0.05, attempts: int = 200
) -> np.ndarray:
    """Perturb the start parameters until all constraints hold with margin."""
    P0 = model.P0
    span = scale * np.maximum(1.0, np.abs(P0))
    for _ in range(attempts):
        P = P0 + rng.uniform(-1.0, 1.0, size=len(P0)) * span
        try:
            _, g = autodiff.eval_tape(model.tape, P)
        except autodiff.NumericError:
            continue
        if len(g) == 0 or g.min() > 1e-3:
            return P
    return P0.copy()


@dataclass
class GradCheckEntry:
    name: str
    max_error: float
    passed: bool


@dataclass
class GradCheckReport:
    model: str
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_error(self) -> float:
        return max((e.max_error for e in self.entries), default=0.0)


def gradient_check(
    model: CompiledModel,
    seed: int = 0,
    n_points: int = 5,
    tol: float = GRAD_TOL,
    h: float = FD_STEP,
    objective_ids: tuple[str, ...] = ALL_OBJECTIVES,
    label: str = "model",
) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    tape = model.tape
    topology = model.interp.topology
    P0 = model.P0
    V0 = model.positions()
    config = ObjectiveConfig(objectives=objective_ids)

    edit = random_edit(topology, V0, rng, n_moved=min(3, topology.n - 1))
    weights = objectives.compute_weights(tape, topology, P0, edit)
    deform = mesh.build_deformation_data(topology, V0)
    edit_energy = objectives.EditEnergy(edit, V0)

    energies: list[objectives.Energy] = [edit_energy]
    for oid in objective_ids:
        if oid == "edit":
            continue
        energies.append(
            objectives.build_energy(
                oid,
                edit=edit,
                weights=weights,
                topology=topology,
                V0=V0,
                P0=P0,
                config=config,
                deform=deform,
            )
        )

    points = [random_feasible_point(model, rng) for _ in range(n_points)]
    entries: list[GradCheckEntry] = []
    for energy in energies:
        worst = 0.0
        for P in points:
            _, grad = energy.value_and_grad(PointEval(tape, P))
            fd = objectives.finite_difference_gradient(
                lambda Q: energy.value(PointEval(tape, Q)), P, h
            )
            worst = max(worst, gradient_error(grad, fd))
        entries.append(GradCheckEntry(energy.id, worst, worst <= tol))

    if tape.n_constraints:
        worst = 0.0
        for P in points:
            _, _, _, Jg = autodiff.full_jacobian(tape, P)
            for j in range(tape.n_constraints):
                fd = objectives.finite_difference_gradient(
                    lambda Q, j=j: float(autodiff.eval_tape(tape, Q)[1][j]), P, h
                )
                worst = max(worst, gradient_error(Jg[j], fd))
        entries.append(GradCheckEntry("constraints", worst, worst <= tol))
    return GradCheckReport(label, entries)
