"""Two-stage model builders, instance generators, and the extensive-form oracle.

The underlying recourse model is

    min  R[ q(xi).x1 + c(xi).x2(xi) ]
    s.t. A(xi) x1 + B(xi) x2(xi) = d(xi),   x1 in [x1_lb, x1_ub],
         x2(xi) in [x2_lb(xi), x2_ub(xi)],

with R one of: expectation, CVaR, or an optimized-certainty-equivalent.  The
risk builders reformulate through the regret trade-off with an epigraph
variable y and per-scenario shortfall variables, producing linear
expectation-form objectives suitable for progressive hedging.

Variable layouts (first-stage block first):
    expectation: z = (x1 | x2),             stage dims (n1, n2)
    cvar:        z = (y, x1 | x2, s),       stage dims (1+n1, n2+1)
    oce:         z = (y, x1 | x2, s+, s-),  stage dims (1+n1, n2+2)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measures import MeasureSpec
from .pha import PHAConfig, ScenarioProgram
from .probspace import (
    FiniteProbSpace,
    PolicyVector,
    Scenario,
    derive_partition,
    space_to_dict,
)
from .qpsolve import QPInstance, QPSolution, objective_value, solve_qp

__all__ = [
    "TwoStageLPData",
    "ExperimentSpec",
    "make_space",
    "build_expectation_two_stage",
    "build_cvar_two_stage",
    "build_oce_two_stage",
    "build_program",
    "gen_airline_instance",
    "gen_random_instance",
    "ExtensiveForm",
    "build_extensive_form",
    "solve_extensive",
    "first_stage_block",
    "save_instance",
    "load_instance",
]

EXTENSIVE_VAR_CAP = 5000


@dataclass(frozen=True)
class TwoStageLPData:
    """Per-scenario linear recourse data with box bounds on both stages."""

    n1: int
    n2: int
    q: np.ndarray       # (S, n1)
    c: np.ndarray       # (S, n2)
    A: np.ndarray       # (S, m, n1)
    B: np.ndarray       # (S, m, n2)
    d: np.ndarray       # (S, m)
    probs: np.ndarray   # (S,)
    x1_lb: np.ndarray = None
    x1_ub: np.ndarray = None
    x2_lb: np.ndarray = None   # (S, n2)
    x2_ub: np.ndarray = None   # (S, n2)

    def __post_init__(self):
        S = np.asarray(self.probs).size
        conv = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        q = conv(self.q).reshape(S, self.n1)
        c = conv(self.c).reshape(S, self.n2)
        A = conv(self.A)
        B = conv(self.B)
        d = conv(self.d)
        if A.shape[0] != S or B.shape[0] != S or d.shape[0] != S:
            raise ValueError("per-scenario arrays must share the leading dimension")
        m = d.shape[1]
        if A.shape != (S, m, self.n1) or B.shape != (S, m, self.n2):
            raise ValueError("A/B shapes must be (S, m, n1) and (S, m, n2)")
        x1_lb = np.zeros(self.n1) if self.x1_lb is None else conv(self.x1_lb)
        x1_ub = np.full(self.n1, np.inf) if self.x1_ub is None else conv(self.x1_ub)
        x2_lb = np.zeros((S, self.n2)) if self.x2_lb is None else conv(self.x2_lb).reshape(S, self.n2)
        x2_ub = np.full((S, self.n2), np.inf) if self.x2_ub is None else conv(self.x2_ub).reshape(S, self.n2)
        for name, val in (("q", q), ("c", c), ("A", A), ("B", B), ("d", d),
                          ("probs", conv(self.probs)), ("x1_lb", x1_lb),
                          ("x1_ub", x1_ub), ("x2_lb", x2_lb), ("x2_ub", x2_ub)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_scenarios(self) -> int:
        return self.probs.size

    @property
    def m_rows(self) -> int:
        return self.d.shape[1]


@dataclass(frozen=True)
class ExperimentSpec:
    """One benchmark configuration: measure, instance source, sizes, solver knobs."""

    measure: MeasureSpec
    source: str = "airline"        # "airline" | "random" | path to a JSON instance
    sn: int = 4
    dims: tuple = (10, 10)
    seed: int = 0
    pha: PHAConfig = field(default_factory=PHAConfig)
    oracle: bool = False

    def __post_init__(self):
        if self.sn < 1:
            raise ValueError("sn must be >= 1")


def make_space(data: TwoStageLPData) -> FiniteProbSpace:
    """Scenario space for two-stage data: the realization is revealed after x1.

    The stage-1 component carries all scenario data bytes (so identical
    scenarios merge into one information class); the stage-2 component is
    empty because nothing further is revealed.
    """
    scens = []
    for i in range(data.n_scenarios):
        blob = np.concatenate([
            data.q[i], data.c[i], data.A[i].ravel(), data.B[i].ravel(), data.d[i],
            np.nan_to_num(data.x2_lb[i], posinf=1e300, neginf=-1e300),
            np.nan_to_num(data.x2_ub[i], posinf=1e300, neginf=-1e300),
        ])
        scens.append(Scenario(id=i, stage_components=(blob, np.zeros(0))))
    return FiniteProbSpace(tuple(scens), data.probs)


def _program(space: FiniteProbSpace, stage_dims, templates, scale: float) -> ScenarioProgram:
    return ScenarioProgram(
        space=space,
        partition=derive_partition(space),
        stage_dims=tuple(stage_dims),
        scenarios=tuple(templates),
        objective_scale=scale,
    )


def _cost_scale(data: TwoStageLPData) -> float:
    """Loss magnitude used to normalize the builders' objectives.

    The hedging loop applies one scalar proximal weight to every coordinate,
    so epigraph/shortfall variables carrying raw money units next to unit
    seat-like variables condition it badly; normalizing the loss to unit
    scale fixes that.  Positive homogeneity of the measures makes the change
    exact: values are reported back in original units via objective_scale.
    """
    return max(1.0, float(np.max(np.abs(data.q))), float(np.max(np.abs(data.c))))


def build_expectation_two_stage(data: TwoStageLPData) -> ScenarioProgram:
    """Risk-neutral model: minimize E[q.x1 + c.x2] with shared x1."""
    space = make_space(data)
    n1, n2 = data.n1, data.n2
    w = _cost_scale(data)
    templates = []
    for i in range(data.n_scenarios):
        Aeq = np.hstack([data.A[i], data.B[i]])
        templates.append(QPInstance(
            Q=np.zeros((n1 + n2, n1 + n2)),
            q=np.concatenate([data.q[i], data.c[i]]) / w,
            Aeq=Aeq, beq=data.d[i],
            lb=np.concatenate([data.x1_lb, data.x2_lb[i]]),
            ub=np.concatenate([data.x1_ub, data.x2_ub[i]]),
        ))
    return _program(space, (n1, n2), templates, w)


def build_cvar_two_stage(data: TwoStageLPData, alpha: float) -> ScenarioProgram:
    """CVaR model via the shortfall reformulation.

    z = (y, x1 | x2, s); objective E[y + s/(1-alpha)] with the per-scenario
    cut  q.x1 + c.x2 - y - s <= 0  and s >= 0; y and x1 are first stage.
    The loss is normalized to unit scale, so y and s are expressed in units
    of ``objective_scale``.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    space = make_space(data)
    n1, n2 = data.n1, data.n2
    w = _cost_scale(data)
    n = 1 + n1 + n2 + 1
    templates = []
    for i in range(data.n_scenarios):
        m = data.m_rows
        Aeq = np.zeros((m, n))
        Aeq[:, 1:1 + n1] = data.A[i]
        Aeq[:, 1 + n1:1 + n1 + n2] = data.B[i]
        cut = np.concatenate([[-1.0], data.q[i] / w, data.c[i] / w, [-1.0]])
        obj = np.zeros(n)
        obj[0] = 1.0
        obj[-1] = 1.0 / (1.0 - alpha)
        lb = np.concatenate([[-np.inf], data.x1_lb, data.x2_lb[i], [0.0]])
        ub = np.concatenate([[np.inf], data.x1_ub, data.x2_ub[i], [np.inf]])
        templates.append(QPInstance(
            Q=np.zeros((n, n)), q=obj, Aeq=Aeq, beq=data.d[i],
            Ain=cut[None, :], bin=np.zeros(1), lb=lb, ub=ub,
        ))
    return _program(space, (1 + n1, n2 + 1), templates, w)


def build_oce_two_stage(data: TwoStageLPData, gamma1: float, gamma2: float) -> ScenarioProgram:
    """Optimized-certainty-equivalent model with a signed shortfall split.

    z = (y, x1 | x2, s+, s-) with s+ - s- = q.x1 + c.x2 - y and objective
    E[y + gamma1*s+ - gamma2*s-]; since gamma1 > gamma2, the split is tight
    (s+ * s- = 0) at any optimum.  Loss normalized as in the CVaR builder.
    """
    if not 0.0 <= gamma2 < 1.0 <= gamma1:
        raise ValueError("need 0 <= gamma2 < 1 <= gamma1")
    space = make_space(data)
    n1, n2 = data.n1, data.n2
    w = _cost_scale(data)
    n = 1 + n1 + n2 + 2
    templates = []
    for i in range(data.n_scenarios):
        m = data.m_rows
        Aeq = np.zeros((m + 1, n))
        Aeq[:m, 1:1 + n1] = data.A[i]
        Aeq[:m, 1 + n1:1 + n1 + n2] = data.B[i]
        # defining row: q.x1 + c.x2 - y - s+ + s- = 0 (in normalized units)
        Aeq[m] = np.concatenate([[-1.0], data.q[i] / w, data.c[i] / w, [-1.0, 1.0]])
        beq = np.concatenate([data.d[i], [0.0]])
        obj = np.zeros(n)
        obj[0] = 1.0
        obj[-2] = gamma1
        obj[-1] = -gamma2
        lb = np.concatenate([[-np.inf], data.x1_lb, data.x2_lb[i], [0.0, 0.0]])
        ub = np.concatenate([[np.inf], data.x1_ub, data.x2_ub[i], [np.inf, np.inf]])
        templates.append(QPInstance(
            Q=np.zeros((n, n)), q=obj, Aeq=Aeq, beq=beq, lb=lb, ub=ub,
        ))
    return _program(space, (1 + n1, n2 + 2), templates, w)


def build_program(data: TwoStageLPData, measure: MeasureSpec) -> ScenarioProgram:
    if measure.kind == "expectation":
        return build_expectation_two_stage(data)
    if measure.kind == "cvar":
        return build_cvar_two_stage(data, measure.alpha)
    if measure.kind == "oce":
        return build_oce_two_stage(data, measure.gamma1, measure.gamma2)
    raise ValueError(f"no two-stage builder for measure kind {measure.kind!r}")


def first_stage_block(policy: PolicyVector) -> np.ndarray:
    """Shared first-stage block of an implementable policy (row 0, stage 1)."""
    return policy.values[0, : policy.stage_dims[0]].copy()


# ---------------------------------------------------------------------------
# instance generators
# ---------------------------------------------------------------------------

AIRLINE_REVENUES = (50.0, 130.0, 100.0)   # economy, business, premier
AIRLINE_CAPACITY = 5.0
AIRLINE_ECON_CAP = 4.0
AIRLINE_DEMAND = ((0.9, 0.1), (2.3, 0.2))  # (mean, std) business / premier


def gen_airline_instance(sn: int, seed: int) -> TwoStageLPData:
    """Seat-allocation instance: shared economy allocation, random class demand.

    First stage allocates economy seats x in [0, 4]; after business/premier
    demands are revealed, the recourse allocates b and p subject to demand
    caps and total capacity 5 (a slack column turns the capacity row into an
    equality).  Costs are negated revenues, equiprobable scenarios; sampled
    normal demands are truncated at 0.
    """
    if sn < 1:
        raise ValueError("sn must be >= 1")
    rng = np.random.default_rng(seed)
    (mu_b, sd_b), (mu_p, sd_p) = AIRLINE_DEMAND
    d_b = np.maximum(rng.normal(mu_b, sd_b, size=sn), 0.0)
    d_p = np.maximum(rng.normal(mu_p, sd_p, size=sn), 0.0)
    r_e, r_b, r_p = AIRLINE_REVENUES
    q = np.tile([-r_e], (sn, 1))
    c = np.tile([-r_b, -r_p, 0.0], (sn, 1))
    A = np.tile([[1.0]], (sn, 1, 1)).reshape(sn, 1, 1)
    B = np.tile([[1.0, 1.0, 1.0]], (sn, 1, 1)).reshape(sn, 1, 3)
    d = np.full((sn, 1), AIRLINE_CAPACITY)
    x2_ub = np.column_stack([d_b, d_p, np.full(sn, np.inf)])
    return TwoStageLPData(
        n1=1, n2=3, q=q, c=c, A=A, B=B, d=d,
        probs=np.full(sn, 1.0 / sn),
        x1_lb=np.zeros(1), x1_ub=np.array([AIRLINE_ECON_CAP]),
        x2_lb=np.zeros((sn, 3)), x2_ub=x2_ub,
    )


def gen_random_instance(n1: int, n2: int, sn: int, seed: int) -> TwoStageLPData:
    """Random recourse data with guaranteed relatively complete recourse.

    The trailing rows of B form an identity block of slack-like columns with
    positive costs, and the right-hand side d dominates A @ x1_ub by a
    strictly positive margin, so every x1 in its box admits a feasible x2.
    All costs lie in [0, 10].
    """
    if n1 < 1 or n2 < 1 or sn < 1:
        raise ValueError("dims and sn must be positive")
    rng = np.random.default_rng(seed)
    m = (n2 + 1) // 2
    n_free = n2 - m
    x1_ub = np.full(n1, 5.0)
    q = rng.uniform(0.0, 10.0, size=(sn, n1))
    c = np.concatenate([
        rng.uniform(0.0, 10.0, size=(sn, n_free)),
        rng.uniform(1.0, 10.0, size=(sn, m)),
    ], axis=1)
    A = rng.uniform(0.0, 2.0, size=(sn, m, n1))
    B_free = rng.uniform(-1.0, 1.0, size=(sn, m, n_free))
    B = np.concatenate([B_free, np.tile(np.eye(m), (sn, 1, 1))], axis=2)
    d = np.einsum("smi,i->sm", A, x1_ub) + rng.uniform(0.5, 3.0, size=(sn, m))
    return TwoStageLPData(
        n1=n1, n2=n2, q=q, c=c, A=A, B=B, d=d,
        probs=np.full(sn, 1.0 / sn),
        x1_lb=np.zeros(n1), x1_ub=x1_ub,
    )


# ---------------------------------------------------------------------------
# deterministic equivalent (extensive form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtensiveForm:
    """Stacked deterministic equivalent plus the scenario-to-column maps."""

    qp: QPInstance
    cols: np.ndarray          # (S, n_scenario_vars) int column indices
    n_ext: int
    stage_dims: tuple
    exfunl_dim: int

    def extract_policy(self, z_ext: np.ndarray) -> PolicyVector:
        dims = self.stage_dims if self.exfunl_dim == 0 else self.stage_dims + (self.exfunl_dim,)
        return PolicyVector(np.asarray(z_ext)[self.cols], dims)


def build_extensive_form(prog: ScenarioProgram, exfunl=None) -> ExtensiveForm:
    """Stack all scenarios into one QP with shared information-class columns.

    Each (stage, information class) pair owns one column block, so
    nonanticipativity is encoded structurally; objectives are probability
    weighted.  A zero-mean trailing block (lifted programs) gets per-scenario
    columns plus explicit averaging equalities; an expectation-functional
    constraint passed as ``exfunl`` is added as explicitly averaged rows.
    """
    space = prog.space
    S = space.n_scenarios
    p = space.probabilities
    dims = prog.stage_dims
    n_scen = prog.n_vars

    offsets = {}
    n_ext = 0
    for k, dk in enumerate(dims, start=1):
        for ci, idx in enumerate(prog.partition.stage_classes(k)):
            offsets[(k, ci)] = n_ext
            n_ext += dk
    u_off = np.zeros(S, dtype=np.int64)
    if prog.exfunl_dim:
        for i in range(S):
            u_off[i] = n_ext
            n_ext += prog.exfunl_dim
    if n_ext > EXTENSIVE_VAR_CAP:
        raise ValueError(
            f"extensive form would have {n_ext} variables (cap {EXTENSIVE_VAR_CAP})"
        )

    cols = np.zeros((S, n_scen), dtype=np.int64)
    for k, dk in enumerate(dims, start=1):
        lo = int(sum(dims[: k - 1]))
        for ci, idx in enumerate(prog.partition.stage_classes(k)):
            start = offsets[(k, ci)]
            for i in idx:
                cols[i, lo:lo + dk] = np.arange(start, start + dk)
    if prog.exfunl_dim:
        zdim = int(sum(dims))
        for i in range(S):
            cols[i, zdim:] = np.arange(u_off[i], u_off[i] + prog.exfunl_dim)

    Q = np.zeros((n_ext, n_ext))
    q = np.zeros(n_ext)
    lb = np.full(n_ext, -np.inf)
    ub = np.full(n_ext, np.inf)
    eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []
    for i, inst in enumerate(prog.scenarios):
        ci = cols[i]
        Q[np.ix_(ci, ci)] += p[i] * inst.Q
        q[ci] += p[i] * inst.q
        lb[ci] = np.maximum(lb[ci], inst.lb)
        ub[ci] = np.minimum(ub[ci], inst.ub)
        if inst.Aeq.shape[0]:
            rows = np.zeros((inst.Aeq.shape[0], n_ext))
            rows[:, ci] = inst.Aeq
            eq_rows.append(rows)
            eq_rhs.append(inst.beq)
        if inst.Ain.shape[0]:
            rows = np.zeros((inst.Ain.shape[0], n_ext))
            rows[:, ci] = inst.Ain
            in_rows.append(rows)
            in_rhs.append(inst.bin)

    if prog.exfunl_dim:
        zdim = int(sum(dims))
        rows = np.zeros((prog.exfunl_dim, n_ext))
        for i in range(S):
            rows[:, cols[i, zdim:]] += p[i] * np.eye(prog.exfunl_dim)
        eq_rows.append(rows)
        eq_rhs.append(np.zeros(prog.exfunl_dim))

    if exfunl is not None:
        H, h0 = exfunl.H, exfunl.h0
        rows = np.zeros((exfunl.out_dim, n_ext))
        rhs = np.zeros(exfunl.out_dim)
        for i in range(S):
            rows[:, cols[i]] += p[i] * H[i]
            rhs -= p[i] * h0[i]
        in_rows.append(rows)
        in_rhs.append(rhs)

    qp = QPInstance(
        Q=Q, q=q,
        Aeq=np.vstack(eq_rows) if eq_rows else None,
        beq=np.concatenate(eq_rhs) if eq_rhs else None,
        Ain=np.vstack(in_rows) if in_rows else None,
        bin=np.concatenate(in_rhs) if in_rhs else None,
        lb=lb, ub=ub,
    )
    return ExtensiveForm(qp=qp, cols=cols, n_ext=n_ext,
                         stage_dims=dims, exfunl_dim=prog.exfunl_dim)


def solve_extensive(
    prog: ScenarioProgram, exfunl=None, tol: float = 1e-10, max_iter: int = 200
):
    """Solve the deterministic equivalent; returns (value, policy, ext, solution)."""
    ext = build_extensive_form(prog, exfunl=exfunl)
    sol = solve_qp(ext.qp, tol=tol, max_iter=max_iter)
    if sol.status != "optimal":
        raise RuntimeError(f"extensive-form solve failed: {sol.status} {sol.message}")
    value = objective_value(ext.qp, sol.z) * prog.objective_scale
    return value, ext.extract_policy(sol.z), ext, sol


# ---------------------------------------------------------------------------
# instance files: probspace schema plus a "two_stage" block
# (infinities are stored as null)
# ---------------------------------------------------------------------------


def _num_out(x: float):
    if math.isinf(x):
        return None
    return float(x)


def _num_in(x, sign: float) -> float:
    return sign * math.inf if x is None else float(x)


def instance_to_dict(data: TwoStageLPData) -> dict:
    doc = space_to_dict(make_space(data))
    doc["two_stage"] = {
        "n1": data.n1,
        "n2": data.n2,
        "x1_lb": [_num_out(v) for v in data.x1_lb],
        "x1_ub": [_num_out(v) for v in data.x1_ub],
        "per_scenario": [
            {
                "q": data.q[i].tolist(),
                "c": data.c[i].tolist(),
                "A": data.A[i].tolist(),
                "B": data.B[i].tolist(),
                "d": data.d[i].tolist(),
                "x2_lb": [_num_out(v) for v in data.x2_lb[i]],
                "x2_ub": [_num_out(v) for v in data.x2_ub[i]],
            }
            for i in range(data.n_scenarios)
        ],
    }
    return doc


def instance_from_dict(doc: dict) -> TwoStageLPData:
    ts = doc["two_stage"]
    recs = ts["per_scenario"]
    S = len(recs)
    probs = np.array([r["prob"] for r in sorted(doc["scenarios"], key=lambda r: r["id"])])
    return TwoStageLPData(
        n1=int(ts["n1"]), n2=int(ts["n2"]),
        q=np.array([r["q"] for r in recs]),
        c=np.array([r["c"] for r in recs]),
        A=np.array([r["A"] for r in recs]),
        B=np.array([r["B"] for r in recs]),
        d=np.array([r["d"] for r in recs]),
        probs=probs,
        x1_lb=np.array([_num_in(v, -1) for v in ts["x1_lb"]]),
        x1_ub=np.array([_num_in(v, +1) for v in ts["x1_ub"]]),
        x2_lb=np.array([[_num_in(v, -1) for v in r["x2_lb"]] for r in recs]),
        x2_ub=np.array([[_num_in(v, +1) for v in r["x2_ub"]] for r in recs]),
    )


def save_instance(data: TwoStageLPData, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(data), fh, indent=2)


def load_instance(path: str) -> TwoStageLPData:
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))
