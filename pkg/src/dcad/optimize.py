"""Constrained nonlinear minimization: min E(P) subject to g_i(P) >= 0.

A sequential quadratic programming loop with a damped-BFGS Hessian model.
Each iteration linearizes the constraints and solves

    min 1/2 d^T B d + grad_f^T d   s.t.   g + J_g d >= 0

by reducing the quadratic program (via the Cholesky factor of B) to a
least-distance problem solved with active-set non-negative least squares,
then takes an Armijo-backtracking step on an exact L1 penalty merit
function. Infeasible starts first run a Gauss-Newton restoration phase on
the squared constraint violation.

Everything is deterministic: identical problems produce bit-identical
iterate sequences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import nnls

from .autodiff import NumericError

ValueGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class NLPProblem:
    objective: ValueGrad
    constraints: Sequence[ValueGrad] = ()
    P0: np.ndarray = None
    tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 200
    # optional fast paths: all constraints (values, Jacobian) in one call,
    # plus value-only probes for the line search
    constraint_block: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    constraint_values: Optional[Callable[[np.ndarray], np.ndarray]] = None
    objective_value: Optional[Callable[[np.ndarray], float]] = None

    def eval_constraints(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.constraint_block is not None:
            g, J = self.constraint_block(P)
            return np.asarray(g, dtype=float), np.asarray(J, dtype=float).reshape(len(g), len(P))
        if not self.constraints:
            return np.zeros(0), np.zeros((0, len(P)))
        vals, grads = [], []
        for c in self.constraints:
            v, gr = c(P)
            vals.append(float(v))
            grads.append(np.asarray(gr, dtype=float))
        return np.array(vals), np.vstack(grads)

    def eval_constraint_values(self, P: np.ndarray) -> np.ndarray:
        if self.constraint_values is not None:
            return np.asarray(self.constraint_values(P), dtype=float)
        return self.eval_constraints(P)[0]

    def eval_value(self, P: np.ndarray) -> float:
        if self.objective_value is not None:
            return float(self.objective_value(P))
        return float(self.objective(P)[0])


@dataclass
class OptResult:
    P: np.ndarray
    status: str  # converged | max_iter | infeasible | numeric_failure
    iterations: int
    objective: float
    max_violation: float
    wall_time: float
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "converged"


@dataclass
class KKTReport:
    stationarity: float
    feasibility: float
    complementarity: float
    dual_feasibility: float

    @property
    def residual(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity, self.dual_feasibility)


def check_kkt(problem: NLPProblem, P: np.ndarray, multipliers: np.ndarray) -> KKTReport:
    """First-order optimality residuals at (P, multipliers) for g >= 0."""
    P = np.asarray(P, dtype=float)
    lam = np.asarray(multipliers, dtype=float)
    _, grad = problem.objective(P)
    g, Jg = problem.eval_constraints(P)
    stationarity = grad - (Jg.T @ lam if len(g) else 0.0)
    return KKTReport(
        stationarity=float(np.max(np.abs(stationarity))) if len(P) else 0.0,
        feasibility=float(np.max(np.maximum(0.0, -g))) if len(g) else 0.0,
        complementarity=float(np.max(np.abs(lam * g))) if len(g) else 0.0,
        dual_feasibility=float(np.max(np.maximum(0.0, -lam))) if len(g) else 0.0,
    )


# ---------------------------------------------------------------------------
# QP subproblem: least-distance programming via NNLS


def _ldp(G: np.ndarray, h: np.ndarray) -> tuple[Optional[np.ndarray], np.ndarray]:
    """min ||z|| s.t. G z >= h. Returns (z, multipliers); z None if the
    constraint set is empty (Lawson-Hanson reduction to NNLS)."""
    k, n = G.shape
    if k == 0:
        return np.zeros(n), np.zeros(0)
    E = np.vstack([G.T, h[None, :]])  # (n+1, k)
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = nnls(E, f)
    r = E @ u - f
    denom = r[-1]
    if denom > -1e-12:
        return None, np.zeros(k)
    z = -r[:n] / denom
    lam = u / (-denom)
    return z, lam


def _solve_qp(
    B: np.ndarray, c: np.ndarray, G: np.ndarray, h: np.ndarray
) -> tuple[np.ndarray, np.ndarray, bool]:
    """min 1/2 d^T B d + c^T d s.t. G d >= h with B positive definite.
    Returns (d, multipliers, relaxed): ``relaxed`` flags an inconsistent
    linearization whose violated rows were scaled back."""
    n = len(c)
    jitter = 0.0
    for _ in range(6):
        try:
            L = np.linalg.cholesky(B + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter = max(1e-10, 10.0 * jitter)
    else:
        L = np.linalg.cholesky(np.eye(n))
    w = sla.solve_triangular(L, c, lower=True)
    if G.shape[0] == 0:
        d = sla.solve_triangular(L.T, -w, lower=False)
        return d, np.zeros(0), False
    Gt = sla.solve_triangular(L, G.T, lower=True).T
    hbar = h + Gt @ w
    relaxed = False
    for t in (1.0, 0.5, 0.1, 0.0):
        ht = np.where(hbar > 0, t * hbar, hbar)
        z, lam = _ldp(Gt, ht)
        if z is not None:
            relaxed = t < 1.0
            break
    d = sla.solve_triangular(L.T, z - w, lower=False)
    return d, lam, relaxed


# ---------------------------------------------------------------------------
# Restoration: pull an infeasible start into the feasible region


def _restore_feasibility(problem: NLPProblem, P: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Gauss-Newton on 1/2 sum max(0, -g_i)^2 until the violation drops
    below feas_tol (or progress stops)."""
    target = problem.feas_tol
    evals = 0
    for _ in range(problem.max_iter):
        g, Jg = problem.eval_constraints(P)
        evals += 1
        viol = np.maximum(0.0, -g)
        worst = float(viol.max()) if len(g) else 0.0
        if worst <= target:
            return P, worst, evals
        r = viol
        Jr = -Jg * (viol > 0)[:, None]
        H = Jr.T @ Jr + 1e-10 * np.eye(len(P))
        grad = Jr.T @ r
        try:
            d = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            d = -grad
        base = 0.5 * float(r @ r)
        alpha = 1.0
        stepped = False
        while alpha >= 1e-12:
            cand = P + alpha * d
            try:
                gc = problem.eval_constraint_values(cand)
            except (NumericError, FloatingPointError):
                alpha *= 0.5
                continue
            vc = np.maximum(0.0, -gc)
            if 0.5 * float(vc @ vc) < base - 1e-16:
                P = cand
                stepped = True
                break
            alpha *= 0.5
        if not stepped:
            break
    g = problem.eval_constraint_values(P)
    worst = float(np.maximum(0.0, -g).max()) if len(g) else 0.0
    return P, worst, evals


# ---------------------------------------------------------------------------
# Main SQP loop


def minimize(problem: NLPProblem, record_trace: bool = False) -> OptResult:
    start_time = time.perf_counter()
    P = np.asarray(problem.P0, dtype=float).copy()
    m = len(P)
    trace: list[dict] = []

    def finish(status: str, it: int, f: float, viol: float, lam: np.ndarray, msg: str = "") -> OptResult:
        return OptResult(
            P=P,
            status=status,
            iterations=it,
            objective=f,
            max_violation=viol,
            wall_time=time.perf_counter() - start_time,
            multipliers=lam,
            message=msg,
            trace=trace,
        )

    if m == 0:
        return finish("converged", 0, problem.eval_value(P), 0.0, np.zeros(0))

    try:
        g0 = problem.eval_constraint_values(P)
        viol0 = float(np.maximum(0.0, -g0).max()) if len(g0) else 0.0
        if viol0 > problem.feas_tol:
            P, viol0, _ = _restore_feasibility(problem, P)
            if viol0 > problem.feas_tol:
                f_now = problem.eval_value(P)
                return finish(
                    "infeasible", 0, f_now, viol0,
                    np.zeros(len(g0)), "restoration could not reach the feasible region",
                )

        B = np.eye(m)
        rho = 1.0
        f, grad = problem.objective(P)
        g, Jg = problem.eval_constraints(P)
        lam = np.zeros(len(g))
        reset_used = False

        for it in range(1, problem.max_iter + 1):
            d, lam_qp, relaxed = _solve_qp(B, grad, Jg, -g)
            if len(lam_qp) == len(g):
                lam = lam_qp

            viol = float(np.maximum(0.0, -g).max()) if len(g) else 0.0
            stat = grad - (Jg.T @ lam if len(g) else 0.0)
            kkt_res = float(np.max(np.abs(stat)))
            if len(g):
                kkt_res = max(kkt_res, float(np.max(np.abs(lam * g))))
            converged = kkt_res <= problem.tol and viol <= problem.feas_tol

            step_norm = float(np.max(np.abs(d))) if m else 0.0
            if record_trace:
                trace.append(
                    {"iteration": it, "objective": f, "violation": viol, "step_norm": step_norm}
                )
            if converged:
                return finish("converged", it, f, viol, lam)
            if step_norm < 1e-12:
                return finish("max_iter", it, f, viol, lam, "step norm underflow")

            # L1 exact-penalty merit; penalty weight stays above the largest
            # multiplier by a margin
            lam_max = float(np.max(lam)) if len(lam) else 0.0
            rho = max(rho, lam_max + 1e-2)
            viol_sum = float(np.maximum(0.0, -g).sum()) if len(g) else 0.0
            merit = f + rho * viol_sum
            descent = float(grad @ d) - rho * viol_sum
            if descent > -1e-16:
                if not reset_used and not np.allclose(B, np.eye(m)):
                    B = np.eye(m)
                    reset_used = True
                    continue
                return finish("max_iter", it, f, viol, lam, "no descent direction")

            alpha = 1.0
            new_P = None
            while alpha >= 1e-12:
                cand = P + alpha * d
                try:
                    f_cand = problem.eval_value(cand)
                    g_cand = problem.eval_constraint_values(cand)
                except (NumericError, FloatingPointError):
                    alpha *= 0.5
                    continue
                viol_cand = float(np.maximum(0.0, -g_cand).sum()) if len(g_cand) else 0.0
                if f_cand + rho * viol_cand <= merit + 1e-4 * alpha * descent:
                    new_P = cand
                    break
                alpha *= 0.5
            if new_P is None:
                if not reset_used:
                    B = np.eye(m)
                    reset_used = True
                    continue
                return finish("max_iter", it, f, viol, lam, "line search stalled")
            reset_used = False

            f_new, grad_new = problem.objective(new_P)
            g_new, Jg_new = problem.eval_constraints(new_P)
            s = new_P - P
            lag_old = grad - (Jg.T @ lam if len(g) else 0.0)
            lag_new = grad_new - (Jg_new.T @ lam if len(g) else 0.0)
            y = lag_new - lag_old

            Bs = B @ s
            sBs = float(s @ Bs)
            sy = float(s @ y)
            if sBs > 0:
                # Powell damping keeps the update positive definite
                if sy < 0.2 * sBs:
                    theta = 0.8 * sBs / (sBs - sy)
                    y = theta * y + (1.0 - theta) * Bs
                    sy = float(s @ y)
                if sy > 1e-12 * sBs:
                    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
                else:
                    B = np.eye(m)

            P, f, grad, g, Jg = new_P, f_new, grad_new, g_new, Jg_new

        viol = float(np.maximum(0.0, -g).max()) if len(g) else 0.0
        return finish("max_iter", problem.max_iter, f, viol, lam)
    except (NumericError, FloatingPointError) as exc:
        return finish(
            "numeric_failure", 0, float("nan"), float("nan"), np.zeros(0),
            f"{exc} at P={np.array2string(P, precision=6)}",
        )
