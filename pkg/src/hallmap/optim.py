"""Damped Gauss-Newton (Levenberg-Marquardt) over lists of SE(3) poses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hallmap.geometry import se3_exp


@dataclass
class SolveReport:
    poses: list
    costs: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    singular: bool = False

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


def retract(poses: list, delta: np.ndarray, free: list) -> list:
    """Left-multiply ``exp(delta_k)`` onto every free pose (``free`` lists their indices)."""
    out = list(poses)
    for k, i in enumerate(free):
        out[i] = se3_exp(delta[6 * k : 6 * k + 6]) @ poses[i]
    return out


def numeric_jacobian(residual, poses: list, which: list, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``residual(poses)`` w.r.t. left twists on ``poses[which]``."""
    r0 = np.asarray(residual(poses))
    J = np.zeros((r0.size, 6 * len(which)))
    for k, i in enumerate(which):
        for d in range(6):
            e = np.zeros(6)
            e[d] = eps
            plus = list(poses)
            minus = list(poses)
            plus[i] = se3_exp(e) @ poses[i]
            minus[i] = se3_exp(-e) @ poses[i]
            J[:, 6 * k + d] = (np.asarray(residual(plus)) - np.asarray(residual(minus))) / (2 * eps)
    return J


def levenberg_marquardt(
    poses: list,
    free: list,
    linearize,
    cost,
    max_iterations: int = 10,
    step_tol: float = 1e-5,
    lam: float = 1e-4,
    max_tries: int = 10,
    cost_tol: float = 0.0,
) -> SolveReport:
    """Minimize ``cost(poses)`` over the poses listed in ``free``.

    ``linearize(poses)`` returns ``(H, g)`` (dense or scipy.sparse) for the
    stacked left twists of the free poses. A step is accepted only when the cost
    does not increase, so the reported costs are non-increasing. Iteration stops
    when the largest twist component of a step is below ``step_tol``, when the
    relative cost decrease of an accepted step is below ``cost_tol``, or when no
    damping in ``max_tries`` attempts yields a non-increasing cost.
    """
    cur = list(poses)
    f0 = float(cost(cur))
    report = SolveReport(list(poses), [f0])
    if not free:
        report.converged = True
        return report
    f_cur = f0
    for it in range(1, max_iterations + 1):
        H, g = linearize(cur)
        diag = H.diagonal() if sp.issparse(H) else np.diag(H).copy()
        if np.any(diag <= 1e-12) or not np.all(np.isfinite(diag)):
            report.singular = True
            report.poses = list(poses)
            report.costs = [f0]
            return report
        accepted = False
        for _ in range(max_tries):
            try:
                if sp.issparse(H):
                    A = (H + sp.diags(lam * diag)).tocsc()
                    delta = -spla.spsolve(A, g)
                else:
                    A = H + np.diag(lam * diag)
                    delta = -np.linalg.solve(A, g)
            except (np.linalg.LinAlgError, RuntimeError):
                report.singular = True
                report.poses = list(poses)
                report.costs = [f0]
                return report
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            cand = retract(cur, delta, free)
            f_new = float(cost(cand))
            if f_new <= f_cur:
                accepted = True
                small_gain = f_cur - f_new <= cost_tol * f_cur
                cur, f_cur = cand, f_new
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 8.0
        report.iterations = it
        if not accepted:
            report.converged = True
            break
        report.costs.append(f_cur)
        if np.max(np.abs(delta)) < step_tol or small_gain:
            report.converged = True
            break
    report.poses = cur
    return report

