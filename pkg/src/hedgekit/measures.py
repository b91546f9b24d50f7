"""Catalog of risk and regret measures on finite probability spaces.

Each cataloged measure comes with three coordinated views:

* a closed-form risk evaluation (``eval_risk``),
* a closed-form regret evaluation (``eval_regret``), and
* the envelope (dual) description: risk = sup of E(xi0 * eta) over a set Q of
  densities inside P = {eta >= 0, E(eta) = 1}; regret = the same sup over the
  relaxed set Q~ obtained by dropping E(eta) = 1.

The certainty-uncertainty trade-off  R(xi0) = min_y { y + V(xi0 - y) }  ties
the two sides together and is implemented independently (1-D golden-section
search) so the closed forms can be cross-checked against it.

Sign convention: xi0_plus = max(xi0, 0) and xi0_minus = max(-xi0, 0), so both
parts are nonnegative and xi0 = xi0_plus - xi0_minus.  Under this convention
the OCE regret  gamma1*E(xi0_plus) - gamma2*E(xi0_minus)  is exactly the
support function of the box  {gamma2 <= eta <= gamma1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .probspace import FiniteProbSpace

__all__ = [
    "RandomVariable",
    "MeasureSpec",
    "Density",
    "eval_regret",
    "eval_risk",
    "cvar_sorted",
    "risk_from_regret",
    "envelope_sup",
    "check_axioms",
    "AxiomReport",
    "rate_based_risk",
    "oce_cvar_tail_level",
]

KINDS = ("expectation", "cvar", "oce", "worst_case", "mean_dev_penalty", "rate_based")


@dataclass(frozen=True)
class RandomVariable:
    """A scalar loss per scenario, tied to its probability space."""

    values: np.ndarray
    space: FiniteProbSpace

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if v.size != self.space.n_scenarios:
            raise ValueError(
                f"{v.size} values for {self.space.n_scenarios} scenarios"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def probs(self) -> np.ndarray:
        return self.space.probabilities

    def mean(self) -> float:
        return float(self.probs @ self.values)

    def shifted(self, y: float) -> "RandomVariable":
        return RandomVariable(self.values - y, self.space)


@dataclass(frozen=True)
class MeasureSpec:
    """Tagged measure description with validated parameters.

    kind: one of expectation | cvar | oce | worst_case | mean_dev_penalty |
    rate_based.  ``alpha`` in [0,1) for cvar; ``0 <= gamma2 < 1 <= gamma1``
    for oce; ``lam`` in [0,1] for the mean-deviation penalty (p_norm fixed
    at 2).
    """

    kind: str
    alpha: float = 0.0
    gamma1: float = 1.0
    gamma2: float = 0.0
    lam: float = 1.0
    p_norm: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == "cvar" and not 0.0 <= self.alpha < 1.0:
            raise ValueError("cvar needs 0 <= alpha < 1")
        if self.kind == "oce" and not 0.0 <= self.gamma2 < 1.0 <= self.gamma1:
            raise ValueError("oce needs 0 <= gamma2 < 1 <= gamma1")
        if self.kind == "mean_dev_penalty":
            if not 0.0 <= self.lam <= 1.0:
                raise ValueError("mean_dev_penalty needs 0 <= lam <= 1")
            if self.p_norm != 2:
                raise ValueError("mean_dev_penalty is cataloged for p_norm=2 only")

    # -- constructors ------------------------------------------------------
    @classmethod
    def expectation(cls) -> "MeasureSpec":
        return cls("expectation")

    @classmethod
    def cvar(cls, alpha: float) -> "MeasureSpec":
        return cls("cvar", alpha=float(alpha))

    @classmethod
    def oce(cls, gamma1: float, gamma2: float) -> "MeasureSpec":
        return cls("oce", gamma1=float(gamma1), gamma2=float(gamma2))

    @classmethod
    def worst_case(cls) -> "MeasureSpec":
        return cls("worst_case")

    @classmethod
    def mean_dev(cls, lam: float) -> "MeasureSpec":
        return cls("mean_dev_penalty", lam=float(lam))

    @classmethod
    def rate_based(cls) -> "MeasureSpec":
        return cls("rate_based")

    def label(self) -> str:
        if self.kind == "cvar":
            return f"cvar@{self.alpha:g}"
        if self.kind == "oce":
            return f"oce@{self.gamma1:g},{self.gamma2:g}"
        if self.kind == "mean_dev_penalty":
            return f"mean_dev@{self.lam:g}"
        return self.kind

    def to_dict(self) -> dict:
        params = {}
        if self.kind == "cvar":
            params["alpha"] = self.alpha
        elif self.kind == "oce":
            params["gamma1"] = self.gamma1
            params["gamma2"] = self.gamma2
        elif self.kind == "mean_dev_penalty":
            params["lam"] = self.lam
            params["p_norm"] = self.p_norm
        return {"kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, doc: dict) -> "MeasureSpec":
        return cls(doc["kind"], **doc.get("params", {}))


@dataclass(frozen=True)
class Density:
    """A dual variable: one nonnegative weight per scenario (candidate eta)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def in_P(self, space: FiniteProbSpace, tol: float = 1e-10) -> bool:
        """Membership in P: eta >= 0 and E(eta) = 1 within tol."""
        if self.values.size != space.n_scenarios:
            return False
        if float(np.min(self.values)) < -tol:
            return False
        return abs(float(space.probabilities @ self.values) - 1.0) <= tol


def _pos(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0)


def _l2(xi_vals: np.ndarray, probs: np.ndarray) -> float:
    return float(np.sqrt(probs @ (xi_vals * xi_vals)))


def cvar_sorted(xi0: RandomVariable, alpha: float) -> float:
    """Conditional value-at-risk by direct tail averaging on sorted atoms.

    Sorts atoms by decreasing value and averages the worst (1-alpha) tail,
    splitting the boundary atom fractionally.  Serves as the independent
    oracle for the 1-D minimization formula of CVaR.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    order = np.argsort(-xi0.values, kind="stable")
    v = xi0.values[order]
    p = xi0.probs[order]
    tail = 1.0 - alpha
    taken = np.clip(tail - np.concatenate(([0.0], np.cumsum(p)[:-1])), 0.0, p)
    return float(taken @ v / tail)


def _box_sup_in_P(xi0: RandomVariable, lo: float, hi: float):
    """Maximize E(xi0*eta) over {lo <= eta <= hi, E(eta)=1} by greedy filling.

    Substituting eta = lo + (hi-lo)*theta with theta in [0,1] turns the budget
    into E(theta) = (1-lo)/(hi-lo); the optimum puts theta=1 on the largest
    atoms until the budget runs out, with one fractional atom at the boundary.
    """
    if not lo <= 1.0 <= hi:
        raise ValueError("box must contain the constant density 1")
    v = xi0.values
    p = xi0.probs
    if hi == lo:
        return float(p @ v), Density(np.full(v.size, 1.0))
    beta = (1.0 - lo) / (hi - lo)
    order = np.argsort(-v, kind="stable")
    theta = np.zeros(v.size)
    budget = beta
    for i in order:
        take = min(budget, p[i])
        theta[i] = take / p[i]
        budget -= take
        if budget <= 0.0:
            break
    eta = lo + (hi - lo) * theta
    return float(p @ (v * eta)), Density(eta)


def eval_regret(m: MeasureSpec, xi0: RandomVariable) -> float:
    """Closed-form regret value; may be +inf (worst case, rate based)."""
    v = xi0.values
    p = xi0.probs
    if m.kind == "expectation":
        return float(p @ _pos(v))
    if m.kind == "cvar":
        return float(p @ _pos(v) / (1.0 - m.alpha))
    if m.kind == "oce":
        return float(m.gamma1 * (p @ _pos(v)) - m.gamma2 * (p @ _pos(-v)))
    if m.kind == "worst_case":
        return 0.0 if float(np.max(v)) <= 0.0 else math.inf
    if m.kind == "mean_dev_penalty":
        return float(m.lam * _l2(_pos(v), p) + max(float(p @ v), 0.0))
    if m.kind == "rate_based":
        if float(np.max(v)) >= 1.0:
            return math.inf
        return float(p @ np.log(1.0 / (1.0 - v)))
    raise AssertionError(m.kind)


def eval_risk(m: MeasureSpec, xi0: RandomVariable) -> float:
    """Closed-form risk value for the cataloged measures."""
    v = xi0.values
    p = xi0.probs
    if m.kind == "expectation":
        return float(p @ v)
    if m.kind == "cvar":
        return cvar_sorted(xi0, m.alpha)
    if m.kind == "oce":
        # piecewise-linear trade-off: the minimum over y is attained at an atom
        best = math.inf
        for y in v:
            best = min(best, y + eval_regret(m, xi0.shifted(y)))
        return float(best)
    if m.kind == "worst_case":
        return float(np.max(v))
    if m.kind == "mean_dev_penalty":
        mean = float(p @ v)
        return mean + m.lam * _l2(_pos(v - mean), p)
    if m.kind == "rate_based":
        return rate_based_risk(xi0, tol=1e-11)
    raise AssertionError(m.kind)


def oce_cvar_tail_level(gamma1: float, gamma2: float) -> float:
    """Tail level at which the OCE risk reduces to a CVaR combination.

    The support function of {gamma2 <= eta <= gamma1, E(eta)=1} works out to
    gamma2*E(xi0) + (1-gamma2)*CVaR_a(xi0) with a = 1 - (1-gamma2)/(gamma1-gamma2).
    For gamma2 = 0 this is the familiar a = 1 - 1/gamma1.
    """
    return 1.0 - (1.0 - gamma2) / (gamma1 - gamma2)


RegretFn = Union[MeasureSpec, Callable[[RandomVariable], float]]


def risk_from_regret(
    m: RegretFn, xi0: RandomVariable, tol: float = 1e-9
) -> tuple[float, float]:
    """Risk via the trade-off formula min_y { y + V(xi0 - y) }.

    ``m`` is a MeasureSpec (regret taken from the catalog) or any callable
    RandomVariable -> float acting as the regret V.  phi(y) = y + V(xi0 - y)
    is convex, with minimizer inside the atom range for every cataloged
    measure; golden-section search localizes it.  For positively homogeneous
    V, phi is asymptotically affine, so a probe of its far slopes detects an
    objective unbounded below (then V induces no risk measure and a
    ValueError is raised).

    Returns (value within tol of the true minimum, an attaining y).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    regret = (lambda rv: eval_regret(m, rv)) if isinstance(m, MeasureSpec) else m

    def phi(y: float) -> float:
        return y + regret(xi0.shifted(y))

    vmin = float(np.min(xi0.values))
    vmax = float(np.max(xi0.values))
    a, b = vmin - 1.0, vmax + 1.0
    span = (b - a) + 2.0
    scale = 1.0 + abs(vmax) + abs(vmin)

    f_b = phi(b)
    if math.isfinite(f_b):
        for reach in (span, 10.0 * span):
            f_far = phi(b + reach)
            if f_far < f_b - 1e-9 * scale and phi(b + 2 * reach) < f_far - 1e-9 * scale:
                raise ValueError(
                    "trade-off objective unbounded below: not a risk measure"
                )
    f_a = phi(a)
    if math.isfinite(f_a):
        for reach in (span, 10.0 * span):
            f_far = phi(a - reach)
            if f_far < f_a - 1e-9 * scale and phi(a - 2 * reach) < f_far - 1e-9 * scale:
                raise ValueError(
                    "trade-off objective unbounded below: not a risk measure"
                )

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = phi(c), phi(d)
    width_goal = max(tol * 1e-3, 5e-14 * (1.0 + b - a))
    for _ in range(300):
        if b - a <= width_goal:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = phi(d)
    y_star = 0.5 * (a + b)
    return phi(y_star), y_star


def envelope_sup(
    m: MeasureSpec, xi0: RandomVariable, constrain_to_P: bool = True
) -> tuple[float, Density]:
    """Evaluate the dual (envelope) representation and return an attaining density.

    With ``constrain_to_P`` the sup runs over the risk envelope Q (densities
    in P); without it, over the relaxed regret envelope Q~.  Box envelopes
    (expectation, cvar, oce) are solved by greedy mass allocation on sorted
    atoms.  The mean-deviation envelopes are evaluated through their closed
    forms together with the known attaining densities (0/0 read as 0):

        Q~ case:  eta = 1_{E(xi0) >= 0} + lam * xi0_plus / ||xi0_plus||
        Q  case:  eta = 1 + lam * (dev_plus - E(dev_plus)) / ||dev_plus||,
                  dev_plus = (xi0 - E(xi0))_plus

    The worst case uses the essential supremum with an indicator density; its
    relaxed sup is +inf as soon as any atom is positive (the returned density
    then points along the diverging direction).
    """
    v = xi0.values
    p = xi0.probs
    if m.kind == "expectation":
        if constrain_to_P:
            return float(p @ v), Density(np.ones(v.size))
        return _box_sup_relaxed(xi0, 0.0, 1.0)
    if m.kind == "cvar":
        hi = 1.0 / (1.0 - m.alpha)
        if constrain_to_P:
            return _box_sup_in_P(xi0, 0.0, hi)
        return _box_sup_relaxed(xi0, 0.0, hi)
    if m.kind == "oce":
        if constrain_to_P:
            return _box_sup_in_P(xi0, m.gamma2, m.gamma1)
        return _box_sup_relaxed(xi0, m.gamma2, m.gamma1)
    if m.kind == "worst_case":
        if constrain_to_P:
            i = int(np.argmax(v))
            eta = np.zeros(v.size)
            eta[i] = 1.0 / p[i]
            return float(np.max(v)), Density(eta)
        if float(np.max(v)) <= 0.0:
            return 0.0, Density(np.zeros(v.size))
        i = int(np.argmax(v))
        eta = np.zeros(v.size)
        eta[i] = 1.0 / p[i]
        return math.inf, Density(eta)
    if m.kind == "mean_dev_penalty":
        if constrain_to_P:
            mean = float(p @ v)
            dev = _pos(v - mean)
            nrm = _l2(dev, p)
            if nrm == 0.0:
                eta = np.ones(v.size)
            else:
                eta = 1.0 + m.lam * (dev - float(p @ dev)) / nrm
            return mean + m.lam * nrm, Density(eta)
        plus = _pos(v)
        nrm = _l2(plus, p)
        mean = float(p @ v)
        direction = np.zeros(v.size) if nrm == 0.0 else m.lam * plus / nrm
        eta = (1.0 if mean >= 0.0 else 0.0) + direction
        return m.lam * nrm + max(mean, 0.0), Density(eta)
    raise ValueError(f"no envelope description cataloged for {m.kind!r}")


def _box_sup_relaxed(xi0: RandomVariable, lo: float, hi: float):
    """Sup of E(xi0*eta) over the box {lo <= eta <= hi}: per-atom choice."""
    eta = np.where(xi0.values > 0.0, hi, lo)
    return float(xi0.probs @ (xi0.values * eta)), Density(eta)


def mean_dev_p1_risk(xi0: RandomVariable, lam: float = 1.0) -> float:
    """Internal oracle: mean-deviation penalty with the 1-norm of the upside.

    Not a cataloged MeasureSpec; used to pin the value induced by the maximum
    of the two expectation regrets.
    """
    mean = xi0.mean()
    return mean + lam * float(xi0.probs @ _pos(xi0.values - mean))


def rate_based_risk(xi0: RandomVariable, tol: float = 1e-10) -> float:
    """Risk of the rate-based measure via its defining root.

    Finds the unique C >= esssup(xi0) - 1 with E(1/(1 - xi0 + C)) = 1 by
    bisection on that strictly decreasing map, then returns
    C + E(log(1/(1 - xi0 + C))).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = xi0.values
    p = xi0.probs
    top = float(np.max(v))

    def g(C: float) -> float:
        return float(p @ (1.0 / (1.0 - v + C)))

    # g blows up at C = top - 1; a quarter of the smallest atom mass to the
    # right of the pole guarantees g(lo) >= p_max / (0.25 p_min) > 1
    lo = top - 1.0 + 0.25 * float(np.min(p))
    hi = max(top, lo + 1.0)
    expansions = 0
    while g(hi) > 1.0:
        hi = lo + 2.0 * (hi - lo)
        expansions += 1
        if expansions > 60:
            raise RuntimeError("rate-based root bracketing failed to expand")
    if g(lo) < 1.0:
        # can happen only if the left endpoint overshot the root; tighten it
        lo = top - 1.0 + 1e-14 * max(1.0, abs(top))
        if g(lo) < 1.0:
            raise RuntimeError("rate-based root not bracketed")
    for _ in range(200):
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if g(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    C = 0.5 * (lo + hi)
    return float(C + p @ np.log(1.0 / (1.0 - v + C)))


# ---------------------------------------------------------------------------
# randomized axiom checking
# ---------------------------------------------------------------------------

_AVERSITY_MARGIN = 1e-10


@dataclass
class AxiomResult:
    name: str
    passed: bool
    failures: int = 0
    witness: Optional[str] = None


@dataclass
class AxiomReport:
    """Per-axiom verdicts from randomized sampling, with a witness on failure."""

    measure: str
    as_regret: bool
    trials: int
    results: dict = field(default_factory=dict)

    def passed(self, name: str) -> bool:
        return self.results[name].passed

    def coherent(self) -> bool:
        """Constancy/zero, convexity, monotonicity, positive homogeneity."""
        return all(
            self.results[k].passed
            for k in ("constancy", "convexity", "monotonicity", "positive_homogeneity")
        )

    def __str__(self) -> str:
        lines = [f"axiom report: {self.measure} as_regret={self.as_regret} trials={self.trials}"]
        for r in self.results.values():
            mark = "PASS" if r.passed else "FAIL"
            extra = f"  [{r.witness}]" if r.witness else ""
            lines.append(f"  {r.name:22s} {mark}{extra}")
        return "\n".join(lines)


def _fin_le(a: float, b: float, slack: float) -> bool:
    """a <= b + slack with extended values: anything <= +inf."""
    if math.isinf(b):
        return b > 0
    if math.isinf(a):
        return False
    return a <= b + slack


def check_axioms(
    m: MeasureSpec, as_regret: bool = False, trials: int = 200, seed: int = 0
) -> AxiomReport:
    """Sample random variables and test the defining axioms of the measure.

    Checks constancy (risk) or zero at zero (regret), convexity,
    monotonicity, positive homogeneity, and aversity (strict domination of
    the mean on non-constant / nonzero samples, with a 1e-10 margin so
    rounding cannot flip the verdict).  Closedness is not finitely checkable
    and is omitted.  Aversity is reported for every measure, including those
    (expectation, CVaR at level 0, zero-penalty mean deviation) that are
    known to fail it; ``coherent()`` aggregates the other four axioms.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    ev = (lambda rv: eval_regret(m, rv)) if as_regret else (lambda rv: eval_risk(m, rv))

    res = {
        name: AxiomResult(name=name, passed=True)
        for name in ("constancy", "convexity", "monotonicity",
                     "positive_homogeneity", "aversity")
    }

    def fail(name: str, witness: str):
        r = res[name]
        r.failures += 1
        if r.witness is None:
            r.witness = witness
        r.passed = False

    for t in range(trials):
        n = int(rng.integers(2, 13))
        p = rng.random(n) + 0.05
        p /= p.sum()
        space = _atom_space(p)
        scale = float(rng.choice([0.3, 1.0, 3.0]))
        a = RandomVariable(rng.normal(scale=scale, size=n), space)
        b_rv = RandomVariable(rng.normal(scale=scale, size=n), space)

        # constancy / zero at zero
        if as_regret:
            v0 = ev(RandomVariable(np.zeros(n), space))
            if not abs(v0) <= 1e-12:
                fail("constancy", f"V(0)={v0:.3e}")
        else:
            C = float(rng.normal(scale=2.0))
            rc = ev(RandomVariable(np.full(n, C), space))
            if not abs(rc - C) <= 1e-10 * (1.0 + abs(C)):
                fail("constancy", f"R({C:.4f})={rc:.6f}")

        # convexity
        lam = float(rng.random())
        mix = RandomVariable((1 - lam) * a.values + lam * b_rv.values, space)
        lhs = ev(mix)
        ra, rb = ev(a), ev(b_rv)
        rhs = math.inf if (math.isinf(ra) or math.isinf(rb)) else (1 - lam) * ra + lam * rb
        if not _fin_le(lhs, rhs, 1e-10 * (1.0 + abs(rhs) if math.isfinite(rhs) else 1.0)):
            fail("convexity", f"lam={lam:.3f} lhs={lhs:.6f} rhs={rhs:.6f}")

        # monotonicity: a <= a + |b|
        bigger = RandomVariable(a.values + np.abs(b_rv.values), space)
        if not _fin_le(ev(a), ev(bigger), 1e-10 * (1.0 + abs(ra) if math.isfinite(ra) else 1.0)):
            fail("monotonicity", f"R(a)={ev(a):.6f} > R(a+|b|)={ev(bigger):.6f}")

        # positive homogeneity
        c = float(rng.uniform(0.2, 4.0))
        rs = ev(RandomVariable(c * a.values, space))
        if math.isinf(ra) or math.isinf(rs):
            if math.isinf(ra) != math.isinf(rs):
                fail("positive_homogeneity", f"c={c:.3f} mixed finiteness")
        elif not abs(rs - c * ra) <= 1e-8 * (1.0 + abs(c * ra)):
            fail("positive_homogeneity", f"c={c:.3f} R(ca)={rs:.6f} cR(a)={c * ra:.6f}")

        # aversity: strict domination of the mean on non-constant (nonzero) samples
        nontrivial = (np.max(a.values) - np.min(a.values) > 1e-8) if not as_regret \
            else (np.max(np.abs(a.values)) > 1e-8)
        if nontrivial:
            gap = (math.inf if math.isinf(ra) else ra - a.mean())
            if not gap > _AVERSITY_MARGIN:
                fail("aversity", f"R-E={gap:.3e} on trial {t}")

    return AxiomReport(measure=m.label(), as_regret=as_regret, trials=trials, results=res)


def _atom_space(p: np.ndarray) -> FiniteProbSpace:
    """Anonymous one-stage space with the given atom probabilities."""
    from .probspace import Scenario

    scens = tuple(
        Scenario(id=i, stage_components=(np.array([float(i)]),)) for i in range(p.size)
    )
    return FiniteProbSpace(scens, p)
