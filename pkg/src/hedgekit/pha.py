"""Progressive hedging: scenario decomposition for convex multistage programs.

Minimizes E[g(z(xi), xi)] over nonanticipative policies subject to
per-scenario polyhedral constraints, by alternating

* Step 1: independent augmented per-scenario solves
      zhat(xi) = argmin_{z in C(xi)} g(z, xi) + v(xi).z + (r/2)||z - z_k(xi)||^2
* Step 2: primal projection onto the nonanticipativity subspace N and the
  dual update v <- v + r * (zhat - P_N zhat), which keeps v in M = N-perp.

Scenario solves are independent and can run in parallel; HEDGEKIT_THREADS
(or PHAConfig.threads) caps the worker count, default serial.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from .probspace import (
    FiniteProbSpace,
    InformationPartition,
    PolicyVector,
    Scenario,
    expectation_norm,
    inner_product,
    project_N,
)
from .qpsolve import QPInstance, QPSolution, solve_qp

__all__ = [
    "ScenarioProgram",
    "PHAConfig",
    "PHAState",
    "PHAResult",
    "IterationRecord",
    "SubproblemError",
    "assemble_subproblem",
    "pha_iterate",
    "pha_solve",
    "compute_residuals",
    "initial_state",
    "program_objective",
    "feasibility_violation",
    "write_log_csv",
]


class SubproblemError(RuntimeError):
    """A scenario subproblem failed; carries the offending scenario id."""

    def __init__(self, scenario_id: int, status: str, message: str = ""):
        self.scenario_id = scenario_id
        self.status = status
        super().__init__(
            f"scenario {scenario_id} subproblem {status}" + (f": {message}" if message else "")
        )


@dataclass(frozen=True)
class ScenarioProgram:
    """Per-scenario convex QP data plus the nonanticipativity structure.

    ``scenarios[i]`` is the constraint set and objective of the i-th scenario
    (in the space's id order) without any proximal terms.  ``stage_dims``
    splits the decision vector into stage blocks; ``partition`` groups
    scenarios into information classes per stage.  A trailing block of
    ``exfunl_dim`` coordinates, when positive, is coupled across scenarios by
    a zero-mean condition instead of stagewise constancy (see
    hedgekit.exfunl); plain progressive hedging requires exfunl_dim == 0.

    Builders may normalize per-scenario costs to unit magnitude for solver
    conditioning; ``objective_scale`` converts template objective values back
    to original units (``program_objective`` applies it).
    """

    space: FiniteProbSpace
    partition: InformationPartition
    stage_dims: tuple
    scenarios: tuple
    exfunl_dim: int = 0
    objective_scale: float = 1.0

    def __post_init__(self):
        scens = tuple(self.scenarios)
        if len(scens) != self.space.n_scenarios:
            raise ValueError("one QP template per scenario required")
        if self.objective_scale <= 0:
            raise ValueError("objective_scale must be positive")
        n = int(sum(self.stage_dims)) + self.exfunl_dim
        for s, inst in zip(self.space.scenarios, scens):
            if inst.n != n:
                raise ValueError(
                    f"scenario {s.id}: variable dim {inst.n}, expected {n}"
                )
        object.__setattr__(self, "scenarios", scens)
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))

    @property
    def n_vars(self) -> int:
        return int(sum(self.stage_dims)) + self.exfunl_dim

    def template(self, scenario_id: int) -> QPInstance:
        return self.scenarios[self.space.index_of(scenario_id)]


@dataclass(frozen=True)
class PHAConfig:
    """Algorithm parameters; r is the proximal/penalty weight (must be > 0)."""

    r: float = 1.0
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0
    inner_tol: float = 1e-9
    inner_max_iter: int = 100
    adaptive_r: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    primal_residual: float
    dual_residual: float
    combined: float
    objective: float
    wall_time_ms: float


@dataclass(frozen=True)
class PHAState:
    """Primal iterate z in N, dual iterate v in M, and the iteration log."""

    z: PolicyVector
    v: PolicyVector
    iter: int
    log: tuple


@dataclass(frozen=True)
class PHAResult:
    z: PolicyVector
    v: PolicyVector
    log: tuple
    converged: bool
    iterations: int
    objective: float
    trace: Optional[tuple] = None


def _resolve_threads(cfg: PHAConfig) -> int:
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    env = os.environ.get("HEDGEKIT_THREADS", "").strip()
    return max(1, int(env)) if env else 1


def assemble_subproblem(
    prog: ScenarioProgram, xi: Scenario, state: PHAState, r: float
) -> QPInstance:
    """Augmented scenario subproblem: g + v.z + (r/2)||z - z_k||^2 over C(xi).

    Folding the proximal term into the quadratic gives the effective data
    Q + r*I and q + v(xi) - r*z_k(xi); the constant term is dropped.  The
    effective Hessian is positive definite for any r > 0.
    """
    i = prog.space.index_of(xi.id)
    base = prog.scenarios[i]
    n = base.n
    Q_eff = base.Q + r * np.eye(n)
    q_eff = base.q + state.v.values[i] - r * state.z.values[i]
    return QPInstance(
        Q=Q_eff, q=q_eff, Aeq=base.Aeq, beq=base.beq,
        Ain=base.Ain, bin=base.bin, lb=base.lb, ub=base.ub,
    )


def _solve_scenarios(
    prog: ScenarioProgram,
    z_vals: np.ndarray,
    v_vals: np.ndarray,
    r: float,
    cfg: PHAConfig,
    warm: Optional[list],
) -> np.ndarray:
    """Step 1: solve every scenario subproblem; returns the stacked zhat."""
    S = prog.space.n_scenarios
    n = prog.n_vars
    zhat = np.empty((S, n))
    eye = np.eye(n)

    def solve_one(i: int) -> None:
        base = prog.scenarios[i]
        inst = QPInstance(
            Q=base.Q + r * eye,
            q=base.q + v_vals[i] - r * z_vals[i],
            Aeq=base.Aeq, beq=base.beq, Ain=base.Ain, bin=base.bin,
            lb=base.lb, ub=base.ub,
        )
        w = warm[i] if warm is not None else None
        # inner_tol is relative to the subproblem gradient scale: an absolute
        # KKT target far below scale * eps is not attainable in float64
        tol_i = cfg.inner_tol * max(1.0, float(np.max(np.abs(inst.q))))
        sol = solve_qp(inst, tol=tol_i, max_iter=cfg.inner_max_iter, warm_z=w)
        if sol.status != "optimal":
            raise SubproblemError(prog.space.scenarios[i].id, sol.status, sol.message)
        zhat[i] = sol.z
        if warm is not None:
            warm[i] = sol.z

    workers = _resolve_threads(cfg)
    if workers > 1 and S > 1:
        with ThreadPoolExecutor(max_workers=min(workers, S)) as pool:
            list(pool.map(solve_one, range(S)))
    else:
        for i in range(S):
            solve_one(i)
    return zhat


def program_objective(prog: ScenarioProgram, z: PolicyVector) -> float:
    """E[g(z(xi), xi)] at the given policy, in original objective units."""
    p = prog.space.probabilities
    total = 0.0
    for i, inst in enumerate(prog.scenarios):
        zi = z.values[i]
        total += p[i] * (0.5 * zi @ inst.Q @ zi + inst.q @ zi)
    return float(total) * prog.objective_scale


def feasibility_violation(prog: ScenarioProgram, z: PolicyVector) -> float:
    """Worst per-scenario constraint violation of the policy (infinity norm)."""
    worst = 0.0
    for i, inst in enumerate(prog.scenarios):
        zi = z.values[i]
        if inst.Aeq.shape[0]:
            worst = max(worst, float(np.max(np.abs(inst.Aeq @ zi - inst.beq))))
        if inst.Ain.shape[0]:
            worst = max(worst, float(np.max(inst.Ain @ zi - inst.bin, initial=0.0)))
        worst = max(worst, float(np.max(inst.lb - zi, initial=0.0)))
        worst = max(worst, float(np.max(zi - inst.ub, initial=0.0)))
    return worst


def _policy(prog: ScenarioProgram, values: np.ndarray) -> PolicyVector:
    dims = prog.stage_dims if prog.exfunl_dim == 0 else prog.stage_dims + (prog.exfunl_dim,)
    return PolicyVector(values, dims)


def pha_iterate(
    prog: ScenarioProgram,
    state: PHAState,
    cfg: PHAConfig,
    warm: Optional[list] = None,
) -> PHAState:
    """One full cycle: scenario solves, projection, dual update, log record."""
    if prog.exfunl_dim:
        raise ValueError("program carries a zero-mean block; use hedgekit.exfunl")
    t0 = time.perf_counter()
    zhat = _solve_scenarios(prog, state.z.values, state.v.values, cfg.r, cfg, warm)

    zhat_pv = _policy(prog, zhat)
    pn = project_N(zhat_pv, prog.partition, prog.space)
    z_next = pn
    resid_vals = zhat - pn.values
    v_next = state.v.replace_values(state.v.values + cfg.r * resid_vals)

    primal = expectation_norm(_policy(prog, resid_vals), prog.space)
    dual = expectation_norm(
        _policy(prog, z_next.values - state.z.values), prog.space
    )
    combined = float(np.hypot(primal, dual))
    objective = program_objective(prog, z_next)
    rec = IterationRecord(
        iter=state.iter + 1,
        primal_residual=primal,
        dual_residual=dual,
        combined=combined,
        objective=objective,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
    )
    return PHAState(z=z_next, v=v_next, iter=state.iter + 1, log=state.log + (rec,))


def compute_residuals(
    prev: PHAState, next: PHAState, r: float, space: FiniteProbSpace
) -> tuple[float, float, float]:
    """Residuals between consecutive states, in the expectation norm.

    primal: nonanticipativity violation of the scenario solutions, recovered
    from the dual update as (v_next - v_prev)/r; dual: movement of the
    implementable iterate; combined: root sum of squares.
    """
    dv = (next.v.values - prev.v.values) / r
    primal = expectation_norm(prev.v.replace_values(dv), space)
    dual = expectation_norm(
        prev.z.replace_values(next.z.values - prev.z.values), space
    )
    return primal, dual, float(np.hypot(primal, dual))


def initial_state(prog: ScenarioProgram, cfg: PHAConfig) -> PHAState:
    """Warm primal start: project the relaxed per-scenario solutions onto N.

    Solves each scenario without proximal terms (v = 0, r = 0); if any of
    those relaxed problems fails (infeasible or unbounded), falls back to the
    zero policy.  The dual always starts at 0, which lies in M.
    """
    S = prog.space.n_scenarios
    n = prog.n_vars
    sols = np.zeros((S, n))
    for i, inst in enumerate(prog.scenarios):
        sol = solve_qp(inst, tol=max(cfg.inner_tol, 1e-9), max_iter=cfg.inner_max_iter)
        if sol.status != "optimal":
            sols = np.zeros((S, n))
            break
        sols[i] = sol.z
    pv = _policy(prog, sols)
    if prog.exfunl_dim == 0:
        z0 = project_N(pv, prog.partition, prog.space)
    else:
        z0 = pv
    v0 = _policy(prog, np.zeros((S, n)))
    return PHAState(z=z0, v=v0, iter=0, log=())


def pha_solve(
    prog: ScenarioProgram, cfg: PHAConfig, keep_trace: bool = False
) -> PHAResult:
    """Iterate to the combined-residual tolerance or the iteration cap.

    Returns the final implementable policy (in N), the dual (in M), the full
    iteration log, and a convergence flag; on hitting max_iter the best
    (latest) iterate is returned flagged as not converged.  With
    ``adaptive_r`` the penalty doubles when the primal residual dominates the
    dual by 10x and halves in the opposite case.
    """
    if prog.exfunl_dim:
        raise ValueError("program carries a zero-mean block; use hedgekit.exfunl")
    state = initial_state(prog, cfg)
    warm: list = [None] * prog.space.n_scenarios
    r = cfg.r
    trace = [(state.z, state.v)] if keep_trace else None
    converged = False
    for _ in range(cfg.max_iter):
        state = pha_iterate(prog, state, replace(cfg, r=r), warm)
        if keep_trace:
            trace.append((state.z, state.v))
        rec = state.log[-1]
        if rec.combined <= cfg.tol:
            converged = True
            break
        if cfg.adaptive_r:
            if rec.primal_residual > 10.0 * rec.dual_residual:
                r *= 2.0
            elif rec.dual_residual > 10.0 * rec.primal_residual:
                r *= 0.5
    objective = state.log[-1].objective if state.log else program_objective(prog, state.z)
    return PHAResult(
        z=state.z,
        v=state.v,
        log=state.log,
        converged=converged,
        iterations=state.iter,
        objective=objective,
        trace=tuple(trace) if keep_trace else None,
    )


def write_log_csv(records: tuple, path: str) -> None:
    """Emit the iteration log; columns follow the record dataclass fields."""
    if records:
        names = [f.name for f in fields(records[0])]
    else:
        names = [f.name for f in fields(IterationRecord)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for rec in records:
            w.writerow(asdict(rec))
