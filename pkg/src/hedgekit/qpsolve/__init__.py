"""Inner solver for per-scenario subproblems: dense convex QPs.

Problem form:

    min  1/2 z'Qz + q'z
    s.t. Aeq z = beq,  Ain z <= bin,  lb <= z <= ub

Q must be symmetric positive semidefinite; the progressive hedging loop always
adds a proximal r*I so the effective Hessian is positive definite.  Bounds may
be -inf/+inf.  The numeric core is a Mehrotra predictor-corrector method (see
``_kernel``); it runs jitted by default and as plain numpy under
``HEDGEKIT_PURE_NUMPY=1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernel import INFEASIBLE, MAX_ITER, NUMERICAL, OPTIMAL, qp_ipm

__all__ = [
    "QPInstance",
    "QPSolution",
    "solve_qp",
    "kkt_residual",
    "objective_value",
]

_SYM_TOL = 1e-12
_STATUS_NAMES = {
    OPTIMAL: "optimal",
    INFEASIBLE: "infeasible",
    MAX_ITER: "max_iter",
    NUMERICAL: "max_iter",  # numerical stall reported as non-convergence
}


def _as2d(a, ncols: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, ncols))
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != ncols:
        raise ValueError(f"expected matrix with {ncols} columns, got {out.shape}")
    return out


def _as1d(a, size: Optional[int] = None) -> np.ndarray:
    if a is None:
        return np.zeros(0)
    out = np.ascontiguousarray(a, dtype=np.float64).ravel()
    if size is not None and out.size != size:
        raise ValueError(f"expected vector of length {size}, got {out.size}")
    return out


@dataclass(frozen=True)
class QPInstance:
    """Dense convex QP data; empty constraint blocks and infinite bounds allowed."""

    Q: np.ndarray
    q: np.ndarray
    Aeq: Optional[np.ndarray] = None
    beq: Optional[np.ndarray] = None
    Ain: Optional[np.ndarray] = None
    bin: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        q = _as1d(self.q)
        n = q.size
        Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        if Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {Q.shape}")
        if np.max(np.abs(Q - Q.T), initial=0.0) > _SYM_TOL * max(
            1.0, float(np.max(np.abs(Q), initial=0.0))
        ):
            raise ValueError("Q must be symmetric within 1e-12")
        Q = 0.5 * (Q + Q.T)
        Aeq = _as2d(self.Aeq, n)
        beq = _as1d(self.beq, Aeq.shape[0])
        Ain = _as2d(self.Ain, n)
        bin_ = _as1d(self.bin, Ain.shape[0])
        lb = np.full(n, -np.inf) if self.lb is None else _as1d(self.lb, n)
        ub = np.full(n, np.inf) if self.ub is None else _as1d(self.ub, n)
        if np.any(lb > ub):
            raise ValueError("lb > ub on some coordinate")
        for name, val in (
            ("Q", Q), ("q", q), ("Aeq", Aeq), ("beq", beq),
            ("Ain", Ain), ("bin", bin_), ("lb", lb), ("ub", ub),
        ):
            arr = np.ascontiguousarray(val)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class QPSolution:
    """Primal point, per-block multipliers, status, and the verified KKT residual."""

    z: np.ndarray
    duals: dict
    status: str
    kkt_residual: float
    iterations: int
    message: str = ""


def _stack_inequalities(inst: QPInstance):
    """Stack Ain/ub/lb rows into one G z <= h system; exact lb==ub goes to Aeq."""
    n = inst.n
    fixed = np.isfinite(inst.lb) & np.isfinite(inst.ub) & (inst.ub - inst.lb <= 1e-14)
    ub_idx = np.where(np.isfinite(inst.ub) & ~fixed)[0]
    lb_idx = np.where(np.isfinite(inst.lb) & ~fixed)[0]
    fix_idx = np.where(fixed)[0]

    rows = [inst.Ain]
    rhs = [inst.bin]
    if ub_idx.size:
        E = np.zeros((ub_idx.size, n))
        E[np.arange(ub_idx.size), ub_idx] = 1.0
        rows.append(E)
        rhs.append(inst.ub[ub_idx])
    if lb_idx.size:
        E = np.zeros((lb_idx.size, n))
        E[np.arange(lb_idx.size), lb_idx] = -1.0
        rows.append(E)
        rhs.append(-inst.lb[lb_idx])
    G = np.ascontiguousarray(np.vstack(rows))
    h = np.ascontiguousarray(np.concatenate(rhs))

    A = inst.Aeq
    b = inst.beq
    if fix_idx.size:
        E = np.zeros((fix_idx.size, n))
        E[np.arange(fix_idx.size), fix_idx] = 1.0
        A = np.ascontiguousarray(np.vstack([A, E]))
        b = np.concatenate([b, inst.lb[fix_idx]])
    return A, b, G, h, ub_idx, lb_idx, fix_idx


def solve_qp(
    inst: QPInstance,
    tol: float = 1e-9,
    max_iter: int = 100,
    warm_z: Optional[np.ndarray] = None,
) -> QPSolution:
    """Solve the QP to the given KKT tolerance (infinity norm over all blocks).

    Parameters
    ----------
    inst : QPInstance
        Problem data; strongly convex after any proximal augmentation, or
        detectably infeasible.
    tol : float
        Bound on stationarity, primal/dual feasibility and complementarity.
    max_iter : int
        Interior-point iteration cap; on hitting it the best iterate is
        returned with status ``max_iter``.
    warm_z : array, optional
        Primal starting point (previous scenario solution in the hedging loop).
    """
    n = inst.n
    A, b, G, h, ub_idx, lb_idx, fix_idx = _stack_inequalities(inst)

    if A.shape[0]:
        # inconsistent equality systems are certified before iterating
        ls = np.linalg.lstsq(A, b, rcond=None)
        gap = float(np.linalg.norm(A @ ls[0] - b, np.inf))
        if gap > 1e-8 * (1.0 + float(np.linalg.norm(b, np.inf))):
            dual_sol = _empty_duals(inst, ub_idx, lb_idx, fix_idx)
            return QPSolution(
                z=ls[0],
                duals=dual_sol,
                status="infeasible",
                kkt_residual=np.inf,
                iterations=0,
                message=f"equality system inconsistent: min residual {gap:.3e}",
            )

    z0 = np.zeros(n) if warm_z is None else np.ascontiguousarray(warm_z, dtype=np.float64).copy()
    try:
        z, y, lam, code, iters, _ = qp_ipm(
            np.ascontiguousarray(inst.Q),
            np.ascontiguousarray(inst.q),
            A, b, G, h, z0, float(tol), int(max_iter),
        )
    except np.linalg.LinAlgError as exc:
        return QPSolution(
            z=z0, duals=_empty_duals(inst, ub_idx, lb_idx, fix_idx),
            status="max_iter", kkt_residual=np.inf, iterations=0,
            message=f"linear algebra failure: {exc}",
        )

    mi_in = inst.Ain.shape[0]
    lam_in = lam[:mi_in] if lam.size else np.zeros(mi_in)
    lam_ub = np.zeros(n)
    lam_lb = np.zeros(n)
    if lam.size:
        lam_ub[ub_idx] = lam[mi_in : mi_in + ub_idx.size]
        lam_lb[lb_idx] = lam[mi_in + ub_idx.size :]
    y_eq = y[: inst.Aeq.shape[0]]
    if fix_idx.size:
        # a fixed coordinate's equality multiplier splits into ub/lb parts
        y_fix = y[inst.Aeq.shape[0] :]
        lam_ub[fix_idx] += np.maximum(y_fix, 0.0)
        lam_lb[fix_idx] += np.maximum(-y_fix, 0.0)

    duals = {"eq": y_eq, "ineq": lam_in, "ub": lam_ub, "lb": lam_lb}
    status = _STATUS_NAMES[int(code)]
    probe = QPSolution(z=z, duals=duals, status=status, kkt_residual=np.nan,
                       iterations=int(iters))
    resid = kkt_residual(inst, probe)
    message = "" if status == "optimal" else f"kernel status code {int(code)}"
    if status == "optimal" and resid > 10 * tol:
        status = "max_iter"
        message = f"residual recheck failed: {resid:.3e}"
    elif status == "max_iter" and resid <= tol:
        # the best iterate meets the contract even though the loop gave up
        status = "optimal"
        message = ""
    return QPSolution(z=z, duals=duals, status=status, kkt_residual=float(resid),
                      iterations=int(iters), message=message)


def _empty_duals(inst: QPInstance, ub_idx, lb_idx, fix_idx) -> dict:
    return {
        "eq": np.zeros(inst.Aeq.shape[0]),
        "ineq": np.zeros(inst.Ain.shape[0]),
        "ub": np.zeros(inst.n),
        "lb": np.zeros(inst.n),
    }


def kkt_residual(inst: QPInstance, sol: QPSolution) -> float:
    """Infinity norm of the stacked KKT system at (z, duals); pure evaluation."""
    z = np.asarray(sol.z, dtype=np.float64)
    if z.shape != (inst.n,):
        raise ValueError(f"solution dimension {z.shape} does not match n={inst.n}")
    y = np.asarray(sol.duals["eq"], dtype=np.float64)
    lam_in = np.asarray(sol.duals["ineq"], dtype=np.float64)
    lam_ub = np.asarray(sol.duals["ub"], dtype=np.float64)
    lam_lb = np.asarray(sol.duals["lb"], dtype=np.float64)

    stat = inst.Q @ z + inst.q + lam_ub - lam_lb
    if inst.Aeq.shape[0]:
        stat += inst.Aeq.T @ y
    if inst.Ain.shape[0]:
        stat += inst.Ain.T @ lam_in
    parts = [np.abs(stat)]

    if inst.Aeq.shape[0]:
        parts.append(np.abs(inst.Aeq @ z - inst.beq))
    if inst.Ain.shape[0]:
        slack = inst.bin - inst.Ain @ z
        parts.append(np.maximum(-slack, 0.0))          # primal violation
        parts.append(np.maximum(-lam_in, 0.0))         # dual feasibility
        parts.append(np.abs(lam_in * slack))           # complementarity

    ub_f = np.isfinite(inst.ub)
    if ub_f.any():
        slack = inst.ub[ub_f] - z[ub_f]
        parts.append(np.maximum(-slack, 0.0))
        parts.append(np.abs(lam_ub[ub_f] * slack))
    lb_f = np.isfinite(inst.lb)
    if lb_f.any():
        slack = z[lb_f] - inst.lb[lb_f]
        parts.append(np.maximum(-slack, 0.0))
        parts.append(np.abs(lam_lb[lb_f] * slack))
    parts.append(np.maximum(-lam_ub, 0.0))
    parts.append(np.maximum(-lam_lb, 0.0))

    return float(max(np.max(p, initial=0.0) for p in parts))


def objective_value(inst: QPInstance, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(0.5 * z @ inst.Q @ z + inst.q @ z)
