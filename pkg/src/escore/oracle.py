"""Exact computations on finite-support laws.

A :class:`DiscreteLaw` pins down everything the estimands depend on: the
covariate marginal (atom probabilities), the true treatment probability and
treated-outcome moments per atom, and the large-sample limits of the fitted
nuisances. All conditional expectations below group atoms by exact (bitwise)
equality of the conditioning value, so every identity can be verified to
floating-point roundoff rather than statistically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "DiscreteLaw",
    "OracleFns",
    "DriftDecomposition",
    "true_theta",
    "reduced_propensity",
    "escore_chain",
    "estimating_equation_mean",
    "check_theorem1",
    "check_theorem2",
    "drift_term",
    "exact_q",
    "check_lemma1_exact",
    "efficiency_bound",
    "if0_variance",
    "oracle_fns",
    "random_law",
    "random_drift_inputs",
    "run_identity_suite",
]


def _arr(v) -> np.ndarray:
    return np.asarray(v, dtype=float)


@dataclass(frozen=True)
class DiscreteLaw:
    """Finite-support joint law plus nuisance limits.

    p: atom probabilities (sum to 1); g: true P(A=1 | atom); m: true
    E[Y | A=1, atom]; sigma0_sq: true Var(Y | A=1, atom); g1, m1: limits of
    the fitted propensity and outcome regression.
    """

    p: np.ndarray
    g: np.ndarray
    m: np.ndarray
    sigma0_sq: np.ndarray
    g1: np.ndarray
    m1: np.ndarray
    w_id: tuple = field(default=())

    def __post_init__(self):
        for name in ("p", "g", "m", "sigma0_sq", "g1", "m1"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        k = self.p.size
        if k < 1 or any(getattr(self, n).size != k for n in ("g", "m", "sigma0_sq", "g1", "m1")):
            raise ValueError("atom arrays must be non-empty and equally long")
        if not self.w_id:
            object.__setattr__(self, "w_id", tuple(range(k)))
        if abs(float(self.p.sum()) - 1.0) > 1e-12 or np.any(self.p <= 0):
            raise ValueError("atom probabilities must be positive and sum to 1")
        if np.any(self.g <= 0) or np.any(self.g >= 1):
            raise ValueError("g must lie in (0, 1)")
        if np.any(self.g1 <= 0) or np.any(self.g1 > 1):
            raise ValueError("g1 must lie in (0, 1]")
        if np.any(self.sigma0_sq < 0):
            raise ValueError("sigma0_sq must be nonnegative")

    @property
    def n_atoms(self) -> int:
        return int(self.p.size)

    def to_json(self) -> str:
        return json.dumps(
            {name: list(getattr(self, name)) for name in ("p", "g", "m", "sigma0_sq", "g1", "m1")},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DiscreteLaw":
        d = json.loads(text)
        return cls(d["p"], d["g"], d["m"], d["sigma0_sq"], d["g1"], d["m1"])


def _group_means(keys, values, weights) -> np.ndarray:
    """Per-atom weighted mean of ``values`` within exact-equality groups of ``keys``."""
    keys = _arr(keys)
    values = _arr(values)
    weights = _arr(weights)
    _, inverse = np.unique(keys, return_inverse=True)
    wsum = np.bincount(inverse, weights=weights)
    vsum = np.bincount(inverse, weights=weights * values)
    if np.any(wsum <= 0):
        raise ValueError("a conditioning group carries no weight")
    return (vsum / wsum)[inverse]


def true_theta(law: DiscreteLaw) -> float:
    """Mean counterfactual outcome: sum of p(w) m(w)."""
    return float(np.sum(law.p * law.m))


def reduced_propensity(law: DiscreteLaw, conditioning: str) -> np.ndarray:
    """Propensity averaged within groups of a conditioning value.

    ``"s"`` conditions on the outcome-limit bias m - m1 (averages true g),
    ``"m"`` conditions on the true outcome regression (averages true g), and
    ``"r1"`` conditions on the residual-bias function (averages g1), which is
    exactly the e-score.
    """
    if conditioning == "s":
        return _group_means(law.m - law.m1, law.g, law.p)
    if conditioning == "m":
        return _group_means(law.m, law.g, law.p)
    if conditioning == "r1":
        return escore_chain(law)[1]
    raise ValueError(f"unknown conditioning {conditioning!r}")


def escore_chain(law: DiscreteLaw) -> tuple[np.ndarray, np.ndarray]:
    """Residual-bias function and e-score, computed exactly.

    r1 is the treated-weighted mean of m - m1 within g1-groups (weights
    p*g, the joint mass of landing on the atom treated); e1 averages g1
    within r1-groups under the marginal atom law.
    """
    r1 = _group_means(law.g1, law.m - law.m1, law.p * law.g)
    e1 = _group_means(r1, law.g1, law.p)
    return r1, e1


def estimating_equation_mean(law: DiscreteLaw, propensity_like, m_like) -> float:
    """Exact mean of the doubly robust estimating function at (e, m, theta).

    Computes sum of p(w) [ g(w)/e(w) (m(w) - m_like(w)) + m_like(w) - theta ]
    with theta the true target, which is the population estimating-equation
    value for an estimator plugging in ``propensity_like`` and ``m_like``.
    """
    e = _arr(propensity_like)
    mk = _arr(m_like)
    theta = true_theta(law)
    return float(np.sum(law.p * (law.g / e * (law.m - mk) + mk - theta)))


def check_theorem2(law: DiscreteLaw) -> float:
    """Estimating-equation mean at the e-score chain and the m limit.

    Zero (to roundoff) whenever g1 equals g atomwise or m1 equals m
    atomwise; informative as a counterexample probe otherwise.
    """
    _, e1 = escore_chain(law)
    return estimating_equation_mean(law, e1, law.m1)


def check_theorem1(law: DiscreteLaw) -> float:
    """Estimating-equation mean at the bias-reduced propensity g_s and m1."""
    g_s = reduced_propensity(law, "s")
    return estimating_equation_mean(law, g_s, law.m1)


def drift_term(law: DiscreteLaw, e_hat, m_hat) -> float:
    """Second-order bias functional: sum of p (1/e)(g - e)(m - m_hat)."""
    e = _arr(e_hat)
    mh = _arr(m_hat)
    if np.any(e <= 0):
        raise ValueError("e_hat must be positive")
    return float(np.sum(law.p * (1.0 / e) * (law.g - e) * (law.m - mh)))


def exact_q(law: DiscreteLaw, e_hat, g_hat, m_hat, *, condition_on_true_m: bool = False) -> np.ndarray:
    """E[A (1/e_hat - 1/g_hat) | conditioning], exactly.

    Conditions on m_hat by default; ``condition_on_true_m`` switches the
    grouping to the true m (the q0 variant used inside the drift analysis).
    """
    t = law.g * (1.0 / _arr(e_hat) - 1.0 / _arr(g_hat))
    keys = law.m if condition_on_true_m else _arr(m_hat)
    return _group_means(keys, t, law.p)


class DriftDecomposition(NamedTuple):
    lhs: float  # drift term beta
    rhs: float  # mean of the targeting score S_h
    remainder: float  # second-order propensity term
    tower_mhat_gap: float  # integral identity for q against m_hat
    tower_m_gap: float  # integral identity for q0 against m

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs - self.remainder


def check_lemma1_exact(law: DiscreteLaw, e_hat, g_hat, m_hat) -> DriftDecomposition:
    """Exact pieces of the drift representation.

    Decomposes beta = P S_h + remainder where S_h(O) = A (q/g)(Y - m_hat)
    with q the exact conditional expectation given m_hat, and
    remainder = sum p (1/g_hat)(g - g_hat)(m - m_hat). The decomposition gap
    is zero whenever the true m is constant within each m_hat-group (in
    particular when all m_hat values are distinct); the two tower gaps are
    zero unconditionally.
    """
    e = _arr(e_hat)
    gh = _arr(g_hat)
    mh = _arr(m_hat)
    if np.any(e <= 0) or np.any(gh <= 0):
        raise ValueError("e_hat and g_hat must be positive")
    lhs = drift_term(law, e, mh)
    q = exact_q(law, e, gh, mh)
    q0 = exact_q(law, e, gh, mh, condition_on_true_m=True)
    h = q / law.g
    rhs = float(np.sum(law.p * law.g * h * (law.m - mh)))
    remainder = float(np.sum(law.p * (1.0 / gh) * (law.g - gh) * (law.m - mh)))
    t = law.g * (1.0 / e - 1.0 / gh)
    tower_mhat = float(np.sum(law.p * q * mh) - np.sum(law.p * t * mh))
    tower_m = float(np.sum(law.p * q0 * law.m) - np.sum(law.p * t * law.m))
    return DriftDecomposition(lhs, rhs, remainder, tower_mhat, tower_m)


def efficiency_bound(law: DiscreteLaw) -> float:
    """Variance of the efficient estimating function:
    E[sigma0^2/g] + E[(m - theta)^2]."""
    theta = true_theta(law)
    return float(np.sum(law.p * law.sigma0_sq / law.g) + np.sum(law.p * (law.m - theta) ** 2))


def if0_variance(law: DiscreteLaw) -> float:
    """Exact variance of the drift-corrected influence function.

    The inverse weight 1/g is shrunk by 1 - (g_m - g)/P(A=1) with g_m the
    propensity averaged within groups of the true m; equals the efficiency
    bound when g_m coincides with g.
    """
    theta = true_theta(law)
    p_a = float(np.sum(law.p * law.g))
    g_m = reduced_propensity(law, "m")
    shrink = 1.0 - (g_m - law.g) / p_a
    return float(
        np.sum(law.p * law.g * (1.0 / law.g) ** 2 * shrink**2 * law.sigma0_sq)
        + np.sum(law.p * (law.m - theta) ** 2)
    )


@dataclass(frozen=True)
class OracleFns:
    """All per-atom oracle quantities for one law, computed in one shot."""

    theta: float
    s: np.ndarray
    g_s: np.ndarray
    g_m: np.ndarray
    r1: np.ndarray
    e1: np.ndarray
    q: np.ndarray
    q0: np.ndarray
    sigma_eff_sq: float
    sigma_etmle_sq: float


def oracle_fns(law: DiscreteLaw, e_hat=None, g_hat=None, m_hat=None) -> OracleFns:
    """Bundle of the exact reductions; q/q0 are taken at the nuisance limits
    (e1 chain, g1, m1) unless explicit per-atom values are supplied."""
    r1, e1 = escore_chain(law)
    e = e1 if e_hat is None else _arr(e_hat)
    gh = law.g1 if g_hat is None else _arr(g_hat)
    mh = law.m1 if m_hat is None else _arr(m_hat)
    return OracleFns(
        theta=true_theta(law),
        s=law.m - law.m1,
        g_s=reduced_propensity(law, "s"),
        g_m=reduced_propensity(law, "m"),
        r1=r1,
        e1=e1,
        q=exact_q(law, e, gh, mh),
        q0=exact_q(law, e, gh, mh, condition_on_true_m=True),
        sigma_eff_sq=efficiency_bound(law),
        sigma_etmle_sq=if0_variance(law),
    )


# ---------------------------------------------------------------------------
# randomized laws for identity sweeps
# ---------------------------------------------------------------------------

def _random_probs(rng: np.random.Generator, k: int) -> np.ndarray:
    p = rng.uniform(0.05, 1.0, size=k)
    return p / p.sum()


def _with_collisions(rng: np.random.Generator, values: np.ndarray) -> np.ndarray:
    """Copy some entries onto others so grouping is nontrivial."""
    v = values.copy()
    k = v.size
    n_dup = int(rng.integers(1, max(2, k // 2) + 1))
    for _ in range(n_dup):
        i, j = rng.integers(0, k, size=2)
        v[i] = v[j]
    return v


def random_law(
    rng: np.random.Generator,
    regime: str = "g_consistent",
    n_atoms: int | None = None,
) -> DiscreteLaw:
    """Random finite law with 3-10 atoms and deliberate value collisions.

    regime "g_consistent": g1 = g atomwise (g drawn with repeated levels),
    m1 misspecified with repeated bias levels. regime "m_consistent":
    m1 = m, g1 an arbitrary misspecified propensity. regime "neither":
    both limits off, useful as a counterexample probe.
    """
    k = int(rng.integers(3, 11)) if n_atoms is None else int(n_atoms)
    p = _random_probs(rng, k)
    m = rng.uniform(-1.0, 2.0, size=k)
    sigma0 = rng.uniform(0.0, 2.0, size=k)
    if regime == "g_consistent":
        g = _with_collisions(rng, rng.uniform(0.05, 0.95, size=k))
        g1 = g.copy()
        bias = _with_collisions(rng, rng.uniform(-1.0, 1.0, size=k))
        m1 = m - bias
    elif regime == "m_consistent":
        g = rng.uniform(0.05, 0.95, size=k)
        g1 = _with_collisions(rng, rng.uniform(0.05, 0.95, size=k))
        m1 = m.copy()
    elif regime == "neither":
        g = rng.uniform(0.05, 0.95, size=k)
        g1 = _with_collisions(rng, rng.uniform(0.05, 0.95, size=k))
        m1 = m - _with_collisions(rng, rng.uniform(0.2, 1.0, size=k))
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return DiscreteLaw(p, g, m, sigma0, g1, m1)


def random_drift_inputs(rng: np.random.Generator, law: DiscreteLaw, *, collide_m_hat: bool = False):
    """Random fitted values (e_hat, g_hat, m_hat) for drift identities.

    m_hat values are distinct by construction unless ``collide_m_hat``, in
    which case collisions are injected together with a true m made constant
    within each collision class so the exact decomposition still applies.
    """
    k = law.n_atoms
    e_hat = rng.uniform(0.05, 0.95, size=k)
    g_hat = rng.uniform(0.05, 0.95, size=k)
    m_hat = rng.uniform(-1.0, 2.0, size=k)
    law_out = law
    if collide_m_hat:
        m_hat = _with_collisions(rng, m_hat)
        _, inv = np.unique(m_hat, return_inverse=True)
        m_aligned = law.m.copy()
        for grp in range(inv.max() + 1):
            members = inv == grp
            m_aligned[members] = m_aligned[members][0]
        law_out = DiscreteLaw(law.p, law.g, m_aligned, law.sigma0_sq, law.g1, law.m1)
    return law_out, e_hat, g_hat, m_hat


def run_identity_suite(n_laws: int = 1000, seed: int = 0, perturb_e1: float = 0.0) -> dict:
    """Sweep the exact identities over randomized laws.

    Returns a report with the max absolute deviation per check, the overall
    pass flag at the 1e-10 gate, and (on failure) the first offending law
    serialized to JSON. ``perturb_e1`` shifts the e-score before the
    estimating-equation check, a negative control that must trip the gate.
    """
    rng = np.random.default_rng(seed)
    names = [
        "theorem2_g_consistent",
        "theorem1_g_consistent",
        "theorem2_m_consistent",
        "theorem1_m_consistent",
        "theorem2_arbitrary_escore_m_consistent",
        "drift_decomposition",
        "drift_equals_score_mean_when_g_known",
        "drift_tower_mhat",
        "drift_tower_m",
        "if0_matches_bound_when_gm_equals_g",
        "escore_variance_reduction",
    ]
    worst = {name: 0.0 for name in names}
    offender = None

    def note(name: str, value: float, law: DiscreteLaw):
        nonlocal offender
        dev = abs(float(value))
        if dev > worst[name]:
            worst[name] = dev
            if dev > 1e-10 and offender is None:
                offender = (name, dev, law.to_json())

    for _ in range(n_laws):
        law_g = random_law(rng, "g_consistent")
        _, e1 = escore_chain(law_g)
        e1_used = np.clip(e1 + perturb_e1, 1e-6, None)
        note("theorem2_g_consistent", estimating_equation_mean(law_g, e1_used, law_g.m1), law_g)
        note("theorem1_g_consistent", check_theorem1(law_g), law_g)

        law_m = random_law(rng, "m_consistent")
        note("theorem2_m_consistent", check_theorem2(law_m), law_m)
        note("theorem1_m_consistent", check_theorem1(law_m), law_m)
        arbitrary_e = rng.uniform(0.05, 0.95, size=law_m.n_atoms)
        note(
            "theorem2_arbitrary_escore_m_consistent",
            estimating_equation_mean(law_m, arbitrary_e, law_m.m1),
            law_m,
        )

        law_d = random_law(rng, "neither")
        law_d, e_hat, g_hat, m_hat = random_drift_inputs(rng, law_d, collide_m_hat=bool(rng.integers(0, 2)))
        dec = check_lemma1_exact(law_d, e_hat, g_hat, m_hat)
        note("drift_decomposition", dec.gap, law_d)
        note("drift_tower_mhat", dec.tower_mhat_gap, law_d)
        note("drift_tower_m", dec.tower_m_gap, law_d)
        dec_known_g = check_lemma1_exact(law_d, e_hat, law_d.g, m_hat)
        note("drift_equals_score_mean_when_g_known", dec_known_g.lhs - dec_known_g.rhs, law_d)

        # distinct m values make the m-grouping trivial, so the g_m = g case
        # of the variance formula must land exactly on the efficiency bound
        if np.unique(law_d.m).size == law_d.n_atoms:
            note("if0_matches_bound_when_gm_equals_g", if0_variance(law_d) - efficiency_bound(law_d), law_d)

        r1, e1g = escore_chain(law_g)
        var_g1 = float(np.sum(law_g.p * (law_g.g1 - np.sum(law_g.p * law_g.g1)) ** 2))
        var_e1 = float(np.sum(law_g.p * (e1g - np.sum(law_g.p * e1g)) ** 2))
        note("escore_variance_reduction", max(0.0, var_e1 - var_g1), law_g)

    max_dev = max(worst.values())
    return {
        "n_laws": n_laws,
        "seed": seed,
        "deviations": worst,
        "max_deviation": max_dev,
        "passed": max_dev <= 1e-10,
        "offender": offender,
    }
