"""Finite scenario spaces, stage-structured policies, and nonanticipativity projections.

A scenario is one realization of the stagewise information process.  Policies
live in the finite-dimensional Hilbert space of per-scenario, stage-structured
vectors under the expectation inner product

    <x, w> = sum_xi p(xi) sum_k x_k(xi) . w_k(xi).

Nonanticipative policies (stage-k block constant on every stage-k information
class) form the subspace N; its orthogonal complement M carries the dual
iterates of progressive hedging.  Both projections reduce to per-class
probability-weighted means, which is all the solver ever needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Scenario",
    "FiniteProbSpace",
    "InformationPartition",
    "PolicyVector",
    "derive_partition",
    "two_stage_partition",
    "inner_product",
    "expectation_norm",
    "conditional_expectation",
    "project_N",
    "project_M",
    "space_to_dict",
    "space_from_dict",
]

PROB_FLOOR = 1e-15
PROB_SUM_TOL = 1e-12


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Scenario:
    """One realization: an id plus a per-stage tuple of component vectors."""

    id: int
    stage_components: tuple

    def __post_init__(self):
        comps = tuple(_freeze(np.atleast_1d(c)) for c in self.stage_components)
        object.__setattr__(self, "stage_components", comps)

    @property
    def n_stages(self) -> int:
        return len(self.stage_components)

    def prefix_key(self, stage: int) -> bytes:
        """Byte key of the history (components of stages 1..stage-1)."""
        return b"".join(c.tobytes() for c in self.stage_components[: stage - 1])


@dataclass(frozen=True)
class FiniteProbSpace:
    """Finitely many scenarios with strictly positive probabilities summing to 1.

    Scenarios are stored sorted by id; ids must be unique.  All scenarios must
    agree on the number of stages and on the per-stage component dimensions.
    """

    scenarios: tuple
    probabilities: np.ndarray

    def __post_init__(self):
        scens = tuple(sorted(self.scenarios, key=lambda s: s.id))
        if len(scens) < 1:
            raise ValueError("a probability space needs at least one scenario")
        ids = [s.id for s in scens]
        if len(set(ids)) != len(ids):
            raise ValueError("scenario ids must be unique")
        p = np.asarray(self.probabilities, dtype=np.float64)
        order = np.argsort([s.id for s in self.scenarios], kind="stable")
        p = p[order]
        if p.shape != (len(scens),):
            raise ValueError("one probability per scenario required")
        if np.any(p <= PROB_FLOOR):
            raise ValueError(f"probabilities must exceed {PROB_FLOOR}")
        if abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError("probabilities must sum to 1 within 1e-12")
        n_stages = scens[0].n_stages
        dims = tuple(c.size for c in scens[0].stage_components)
        for s in scens:
            if s.n_stages != n_stages:
                raise ValueError(f"scenario {s.id}: expected {n_stages} stages")
            if tuple(c.size for c in s.stage_components) != dims:
                raise ValueError(f"scenario {s.id}: stage component dims differ")
        object.__setattr__(self, "scenarios", scens)
        object.__setattr__(self, "probabilities", _freeze(p))

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def n_stages(self) -> int:
        return self.scenarios[0].n_stages

    @property
    def ids(self) -> tuple:
        return tuple(s.id for s in self.scenarios)

    def index_of(self, scenario_id: int) -> int:
        for i, s in enumerate(self.scenarios):
            if s.id == scenario_id:
                return i
        raise KeyError(f"no scenario with id {scenario_id}")


@dataclass(frozen=True)
class InformationPartition:
    """Per-stage partition of scenario row indices into information classes.

    ``classes[k-1]`` lists, for stage k, the index arrays of scenarios that
    share the stage-k history.  Stage 1 is always the single full class, and
    classes refine as the stage increases.
    """

    classes: tuple

    def __post_init__(self):
        frozen = tuple(
            tuple(np.asarray(idx, dtype=np.int64) for idx in stage)
            for stage in self.classes
        )
        object.__setattr__(self, "classes", frozen)

    @property
    def n_stages(self) -> int:
        return len(self.classes)

    def stage_classes(self, stage: int) -> tuple:
        if not 1 <= stage <= self.n_stages:
            raise ValueError(f"stage {stage} out of range 1..{self.n_stages}")
        return self.classes[stage - 1]


def derive_partition(space: FiniteProbSpace) -> InformationPartition:
    """Group scenarios by exact byte equality of their stage-history prefixes."""
    stages = []
    for k in range(1, space.n_stages + 1):
        groups: dict = {}
        for i, s in enumerate(space.scenarios):
            groups.setdefault(s.prefix_key(k), []).append(i)
        stages.append(tuple(np.array(g, dtype=np.int64) for g in groups.values()))
    return InformationPartition(tuple(stages))


def two_stage_partition(n_scenarios: int) -> InformationPartition:
    """Degenerate two-stage partition: one shared class, then singletons."""
    first = (np.arange(n_scenarios, dtype=np.int64),)
    second = tuple(np.array([i], dtype=np.int64) for i in range(n_scenarios))
    return InformationPartition((first, second))


@dataclass(frozen=True)
class PolicyVector:
    """Per-scenario, stage-structured real vectors.

    ``values[i]`` is the flat vector for the i-th scenario in the space's id
    order; ``stage_dims`` slices it into stage blocks.
    """

    values: np.ndarray
    stage_dims: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be (n_scenarios, total_dim)")
        dims = tuple(int(d) for d in self.stage_dims)
        if sum(dims) != v.shape[1]:
            raise ValueError("stage_dims must sum to the flat dimension")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "stage_dims", dims)

    @classmethod
    def zeros(cls, n_scenarios: int, stage_dims: Sequence[int]) -> "PolicyVector":
        return cls(np.zeros((n_scenarios, int(sum(stage_dims)))), tuple(stage_dims))

    @property
    def n_scenarios(self) -> int:
        return self.values.shape[0]

    @property
    def total_dim(self) -> int:
        return self.values.shape[1]

    def stage_slice(self, stage: int) -> slice:
        if not 1 <= stage <= len(self.stage_dims):
            raise ValueError(f"stage {stage} out of range")
        lo = int(sum(self.stage_dims[: stage - 1]))
        return slice(lo, lo + self.stage_dims[stage - 1])

    def by_scenario(self, space: FiniteProbSpace) -> dict:
        """Map scenario-id -> flat vector copy, for inspection."""
        self._check_space(space)
        return {s.id: self.values[i].copy() for i, s in enumerate(space.scenarios)}

    def _check_space(self, space: FiniteProbSpace) -> None:
        if self.n_scenarios != space.n_scenarios:
            raise ValueError(
                f"policy has {self.n_scenarios} rows, space has {space.n_scenarios}"
            )

    def replace_values(self, values: np.ndarray) -> "PolicyVector":
        return PolicyVector(values, self.stage_dims)


def _check_pair(a: PolicyVector, b: PolicyVector, space: FiniteProbSpace) -> None:
    a._check_space(space)
    b._check_space(space)
    if a.stage_dims != b.stage_dims:
        raise ValueError(f"stage_dims differ: {a.stage_dims} vs {b.stage_dims}")


def inner_product(a: PolicyVector, b: PolicyVector, space: FiniteProbSpace) -> float:
    """Expectation inner product: sum_xi p(xi) x(xi) . w(xi)."""
    _check_pair(a, b, space)
    return float(np.einsum("s,sd,sd->", space.probabilities, a.values, b.values))


def expectation_norm(x: PolicyVector, space: FiniteProbSpace) -> float:
    return float(np.sqrt(max(inner_product(x, x, space), 0.0)))


def conditional_expectation(
    x: PolicyVector,
    stage: int,
    partition: InformationPartition,
    space: FiniteProbSpace,
) -> PolicyVector:
    """Replace the stage block by its probability-weighted mean on each class.

    Only the given stage's block changes; other stages pass through untouched.
    """
    x._check_space(space)
    if not 1 <= stage <= len(x.stage_dims):
        raise ValueError(f"stage {stage} out of range 1..{len(x.stage_dims)}")
    sl = x.stage_slice(stage)
    out = x.values.copy()
    p = space.probabilities
    for idx in partition.stage_classes(stage):
        w = p[idx]
        mean = w @ x.values[idx, sl] / w.sum()
        out[idx, sl] = mean
    return x.replace_values(out)


def project_N(
    x: PolicyVector, partition: InformationPartition, space: FiniteProbSpace
) -> PolicyVector:
    """Orthogonal projection onto the nonanticipativity subspace N.

    Applies the stage-k conditional expectation at every stage; the output's
    stage-k block is constant on each stage-k information class.
    """
    out = x
    for k in range(1, len(x.stage_dims) + 1):
        out = conditional_expectation(out, k, partition, space)
    return out


def project_M(
    x: PolicyVector, partition: InformationPartition, space: FiniteProbSpace
) -> PolicyVector:
    """Projection onto M, the orthogonal complement of N: x - project_N(x)."""
    pn = project_N(x, partition, space)
    return x.replace_values(x.values - pn.values)


# ---------------------------------------------------------------------------
# Instance file schema (base part):
#   {"stages": N, "stage_dims": [m_1, ..., m_N],
#    "scenarios": [{"id": int, "components": [[...], ...], "prob": float}, ...]}
# Scenarios are emitted sorted by id.  Problem builders append a "two_stage"
# block on top of this (see hedgekit.problems).
# ---------------------------------------------------------------------------


def space_to_dict(space: FiniteProbSpace) -> dict:
    return {
        "stages": space.n_stages,
        "stage_dims": [int(c.size) for c in space.scenarios[0].stage_components],
        "scenarios": [
            {
                "id": int(s.id),
                "components": [c.tolist() for c in s.stage_components],
                "prob": float(p),
            }
            for s, p in zip(space.scenarios, space.probabilities)
        ],
    }


def space_from_dict(doc: dict) -> FiniteProbSpace:
    scens = []
    probs = []
    for rec in sorted(doc["scenarios"], key=lambda r: r["id"]):
        comps = tuple(np.asarray(c, dtype=np.float64) for c in rec["components"])
        if len(comps) != doc["stages"]:
            raise ValueError(f"scenario {rec['id']}: wrong number of stages")
        scens.append(Scenario(id=int(rec["id"]), stage_components=comps))
        probs.append(float(rec["prob"]))
    return FiniteProbSpace(tuple(scens), np.asarray(probs))


def save_space(space: FiniteProbSpace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(space_to_dict(space), fh, indent=2)


def load_space(path: str) -> FiniteProbSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return space_from_dict(json.load(fh))
