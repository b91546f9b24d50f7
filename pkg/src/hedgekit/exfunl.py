"""Progressive hedging with expectation-functional constraints.

A constraint E[hbar(z(xi), xi)] <= 0 couples all scenarios at once, so it
cannot sit inside the per-scenario sets C(xi).  Introducing an auxiliary
block u(xi) restores decomposability through the equivalence

    E[hbar(z(xi), xi)] <= 0
      <=>  exists u(.):  hbar(z(xi), xi) <= u(xi) for all xi,  E[u(xi)] = 0.

The enlarged primal space pairs the nonanticipativity condition on z with a
zero-mean condition on u (subspace N'); the dual complement M' pairs duals
v in M with a scenario-constant w.  The hedging cycle then runs verbatim on
the enlarged variables:

  Step 1: per-scenario solve over C(xi) and hbar <= u with proximal terms on
          both z and u (w.u enters the objective linearly);
  Step 2: z <- P_N(zhat),  u(xi) <- uhat(xi) - E[uhat],
          v <- v + r (zhat - P_N zhat),  w <- w + r E[uhat].

Only affine hbar is supported so the subproblems stay quadratic programs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pha import (
    IterationRecord,
    PHAConfig,
    ScenarioProgram,
    SubproblemError,
    initial_state,
    program_objective,
)
from .probspace import (
    FiniteProbSpace,
    InformationPartition,
    PolicyVector,
    expectation_norm,
    project_N,
)
from .qpsolve import QPInstance, solve_qp

__all__ = [
    "ExFunlConstraint",
    "LiftedPolicy",
    "LiftedState",
    "LiftedRecord",
    "ExFunlResult",
    "lift_instance",
    "project_Nprime",
    "exfunl_iterate",
    "exfunl_solve",
    "exfunl_expectation",
]


@dataclass(frozen=True)
class ExFunlConstraint:
    """Affine per-scenario maps hbar(z, xi) = H(xi) z + h0(xi), one row set per scenario."""

    H: np.ndarray    # (S, k, n)
    h0: np.ndarray   # (S, k)

    def __post_init__(self):
        H = np.ascontiguousarray(self.H, dtype=np.float64)
        h0 = np.ascontiguousarray(self.h0, dtype=np.float64)
        if H.ndim != 3:
            raise ValueError("H must be (S, k, n)")
        if h0.shape != H.shape[:2]:
            raise ValueError("h0 must be (S, k)")
        H.setflags(write=False)
        h0.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h0", h0)

    @property
    def out_dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self.H.shape[0]

    def evaluate(self, z_vals: np.ndarray) -> np.ndarray:
        """Per-scenario values hbar(z_i, xi_i), shape (S, k)."""
        return np.einsum("skn,sn->sk", self.H, z_vals) + self.h0


def exfunl_expectation(cons: ExFunlConstraint, z: PolicyVector, space: FiniteProbSpace) -> np.ndarray:
    """E[hbar(z(xi), xi)] componentwise."""
    return space.probabilities @ cons.evaluate(z.values)


@dataclass(frozen=True)
class LiftedPolicy:
    """Element of the enlarged primal space: a policy plus the auxiliary block."""

    z: PolicyVector
    u: np.ndarray     # (S, k)

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != self.z.n_scenarios:
            raise ValueError("u must be (n_scenarios, k)")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class LiftedRecord(IterationRecord):
    exfunl_violation: float = 0.0
    w_norm: float = 0.0


@dataclass(frozen=True)
class LiftedState:
    """Primal blocks (z, u) and dual blocks (v, w); w is provably scenario-constant,
    so a single copy is stored."""

    z: PolicyVector
    u: np.ndarray          # (S, k), zero mean
    v: PolicyVector
    w: np.ndarray          # (k,)
    iter: int
    log: tuple


def lift_instance(prog: ScenarioProgram, cons: ExFunlConstraint) -> ScenarioProgram:
    """Enlarge each scenario with the u block and the rows hbar(z, xi) <= u.

    The returned program records exfunl_dim = k: its trailing block is coupled
    by the zero-mean condition rather than stagewise constancy.
    """
    if prog.exfunl_dim:
        raise ValueError("program already lifted")
    if cons.n_scenarios != prog.space.n_scenarios:
        raise ValueError("constraint/scenario count mismatch")
    n = prog.n_vars
    if cons.H.shape[2] != n:
        raise ValueError(f"constraint maps act on dim {cons.H.shape[2]}, program has {n}")
    k = cons.out_dim
    templates = []
    for i, inst in enumerate(prog.scenarios):
        Q = np.zeros((n + k, n + k))
        Q[:n, :n] = inst.Q
        q = np.concatenate([inst.q, np.zeros(k)])
        Aeq = np.hstack([inst.Aeq, np.zeros((inst.Aeq.shape[0], k))]) if inst.Aeq.shape[0] else None
        beq = inst.beq if inst.Aeq.shape[0] else None
        link = np.hstack([cons.H[i], -np.eye(k)])
        if inst.Ain.shape[0]:
            Ain = np.vstack([np.hstack([inst.Ain, np.zeros((inst.Ain.shape[0], k))]), link])
            bin_ = np.concatenate([inst.bin, -cons.h0[i]])
        else:
            Ain = link
            bin_ = -cons.h0[i]
        lb = np.concatenate([inst.lb, np.full(k, -np.inf)])
        ub = np.concatenate([inst.ub, np.full(k, np.inf)])
        templates.append(QPInstance(Q=Q, q=q, Aeq=Aeq, beq=beq, Ain=Ain, bin=bin_, lb=lb, ub=ub))
    return ScenarioProgram(
        space=prog.space,
        partition=prog.partition,
        stage_dims=prog.stage_dims,
        scenarios=tuple(templates),
        exfunl_dim=k,
        objective_scale=prog.objective_scale,
    )


def project_Nprime(
    eta: LiftedPolicy, partition: InformationPartition, space: FiniteProbSpace
) -> LiftedPolicy:
    """Projection onto N': nonanticipativity on z, mean removal on u."""
    z_proj = project_N(eta.z, partition, space)
    ubar = space.probabilities @ eta.u
    return LiftedPolicy(z=z_proj, u=eta.u - ubar)


def _solve_lifted_scenario(
    lifted: ScenarioProgram,
    i: int,
    z_vals: np.ndarray,
    u_vals: np.ndarray,
    v_vals: np.ndarray,
    w: np.ndarray,
    r: float,
    cfg: PHAConfig,
    warm: Optional[list] = None,
):
    """Step-1 subproblem for one scenario; returns (zhat_i, uhat_i)."""
    n = int(sum(lifted.stage_dims))
    k = lifted.exfunl_dim
    base = lifted.scenarios[i]
    Q_eff = base.Q + r * np.eye(n + k)
    q_eff = base.q + np.concatenate([
        v_vals[i] - r * z_vals[i],
        w - r * u_vals[i],
    ])
    inst = QPInstance(Q=Q_eff, q=q_eff, Aeq=base.Aeq, beq=base.beq,
                      Ain=base.Ain, bin=base.bin, lb=base.lb, ub=base.ub)
    tol_i = cfg.inner_tol * max(1.0, float(np.max(np.abs(inst.q))))
    sol = solve_qp(inst, tol=tol_i, max_iter=cfg.inner_max_iter,
                   warm_z=warm[i] if warm is not None else None)
    if sol.status != "optimal":
        raise SubproblemError(lifted.space.scenarios[i].id, sol.status, sol.message)
    if warm is not None:
        warm[i] = sol.z
    return sol.z[:n], sol.z[n:]


def exfunl_iterate(
    lifted: ScenarioProgram,
    state: LiftedState,
    cfg: PHAConfig,
    warm: Optional[list] = None,
) -> LiftedState:
    """One cycle of the modified algorithm on a lifted program."""
    if lifted.exfunl_dim == 0:
        raise ValueError("program has no zero-mean block; use hedgekit.pha")
    t0 = time.perf_counter()
    space = lifted.space
    S = space.n_scenarios
    n = int(sum(lifted.stage_dims))
    k = lifted.exfunl_dim
    p = space.probabilities

    zhat = np.empty((S, n))
    uhat = np.empty((S, k))
    for i in range(S):
        zhat[i], uhat[i] = _solve_lifted_scenario(
            lifted, i, state.z.values, state.u, state.v.values, state.w, cfg.r, cfg, warm
        )

    zhat_pv = PolicyVector(zhat, lifted.stage_dims)
    pn = project_N(zhat_pv, lifted.partition, space)
    ubar = p @ uhat

    z_next = pn
    u_next = uhat - ubar
    v_next = state.v.replace_values(state.v.values + cfg.r * (zhat - pn.values))
    w_next = state.w + cfg.r * ubar

    prim_z = expectation_norm(zhat_pv.replace_values(zhat - pn.values), space)
    primal = float(np.sqrt(prim_z ** 2 + ubar @ ubar))
    dual_z = expectation_norm(pn.replace_values(z_next.values - state.z.values), space)
    du = u_next - state.u
    dual = float(np.sqrt(dual_z ** 2 + p @ np.einsum("sk,sk->s", du, du)))
    combined = float(np.hypot(primal, dual))

    objective = 0.0
    for i, inst in enumerate(lifted.scenarios):
        zi = np.concatenate([z_next.values[i], u_next[i]])
        objective += p[i] * (0.5 * zi @ inst.Q @ zi + inst.q @ zi)
    objective *= lifted.objective_scale

    hbar_mean = _mean_hbar(lifted, z_next.values, u_next, p)
    rec = LiftedRecord(
        iter=state.iter + 1,
        primal_residual=primal,
        dual_residual=dual,
        combined=combined,
        objective=float(objective),
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        exfunl_violation=float(max(np.max(hbar_mean, initial=-np.inf), 0.0)),
        w_norm=float(np.linalg.norm(w_next)),
    )
    return LiftedState(z=z_next, u=u_next, v=v_next, w=w_next,
                       iter=state.iter + 1, log=state.log + (rec,))


def _mean_hbar(lifted: ScenarioProgram, z_vals: np.ndarray, u_vals: np.ndarray, p: np.ndarray):
    """E[hbar(z)] recovered from the trailing link rows hbar(z) - u <= 0."""
    n = int(sum(lifted.stage_dims))
    k = lifted.exfunl_dim
    out = np.zeros(k)
    for i, inst in enumerate(lifted.scenarios):
        link = inst.Ain[-k:]
        rhs = inst.bin[-k:]
        vals = link[:, :n] @ z_vals[i] - rhs   # = H z + h0
        out += p[i] * vals
    return out


@dataclass(frozen=True)
class ExFunlResult:
    z: PolicyVector
    u: np.ndarray
    v: PolicyVector
    w: np.ndarray
    log: tuple
    converged: bool
    iterations: int
    objective: float


def exfunl_solve(
    prog: ScenarioProgram, cons: ExFunlConstraint, cfg: PHAConfig
) -> ExFunlResult:
    """Lift the program and iterate to tolerance on the enlarged residuals.

    Starts from the plain warm primal (relaxed scenario solves projected onto
    N), u = 0, v = 0, w = 0, which satisfies every invariant of the enlarged
    spaces.  The converged policy satisfies E[hbar(z)] <= tol componentwise.
    """
    lifted = lift_instance(prog, cons)
    base_state = initial_state(prog, cfg)
    S = prog.space.n_scenarios
    k = cons.out_dim
    state = LiftedState(
        z=base_state.z,
        u=np.zeros((S, k)),
        v=base_state.v,
        w=np.zeros(k),
        iter=0,
        log=(),
    )
    warm: list = [None] * S
    converged = False
    for _ in range(cfg.max_iter):
        state = exfunl_iterate(lifted, state, cfg, warm)
        if state.log[-1].combined <= cfg.tol:
            converged = True
            break
    objective = state.log[-1].objective if state.log else program_objective(prog, state.z)
    return ExFunlResult(
        z=state.z, u=state.u, v=state.v, w=state.w,
        log=state.log, converged=converged, iterations=state.iter,
        objective=objective,
    )
