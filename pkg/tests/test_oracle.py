import numpy as np
import pytest

from escore.oracle import (
    DiscreteLaw,
    check_lemma1_exact,
    check_theorem1,
    check_theorem2,
    drift_term,
    efficiency_bound,
    escore_chain,
    estimating_equation_mean,
    exact_q,
    if0_variance,
    oracle_fns,
    random_drift_inputs,
    random_law,
    reduced_propensity,
    run_identity_suite,
    true_theta,
)


def make_law(p, g, m, m1=None, g1=None, s2=None):
    p = np.asarray(p, float)
    g = np.asarray(g, float)
    m = np.asarray(m, float)
    return DiscreteLaw(
        p=p,
        g=g,
        m=m,
        sigma0_sq=np.zeros_like(p) if s2 is None else np.asarray(s2, float),
        g1=g.copy() if g1 is None else np.asarray(g1, float),
        m1=m.copy() if m1 is None else np.asarray(m1, float),
    )


# ---------------------------------------------------------------------------
# independent enumeration oracle (dict-based, no numpy grouping tricks)
# ---------------------------------------------------------------------------

def enum_group_mean(keys, values, weights):
    sums = {}
    for k, v, w in zip(keys, values, weights):
        a, b = sums.get(k, (0.0, 0.0))
        sums[k] = (a + w * v, b + w)
    return [sums[k][0] / sums[k][1] for k in keys]


def enum_escore_chain(law):
    r1 = enum_group_mean(law.g1.tolist(), (law.m - law.m1).tolist(), (law.p * law.g).tolist())
    e1 = enum_group_mean(r1, law.g1.tolist(), law.p.tolist())
    return np.array(r1), np.array(e1)


# ---------------------------------------------------------------------------
# true_theta
# ---------------------------------------------------------------------------

def test_theta_constant_m():
    law = make_law([0.3, 0.7], [0.4, 0.6], [2.5, 2.5])
    assert true_theta(law) == pytest.approx(2.5, abs=1e-15)


def test_theta_two_atoms():
    law = make_law([0.5, 0.5], [0.4, 0.6], [0.0, 1.0])
    assert true_theta(law) == pytest.approx(0.5, abs=1e-15)


def test_theta_three_atom_hand_sum():
    law = make_law([0.2, 0.3, 0.5], [0.5, 0.5, 0.5], [0.1, 0.4, 0.8])
    assert true_theta(law) == pytest.approx(0.54, abs=1e-15)


# ---------------------------------------------------------------------------
# reduced_propensity
# ---------------------------------------------------------------------------

def test_reduced_propensity_distinct_values_identity():
    law = make_law([0.2, 0.3, 0.5], [0.2, 0.5, 0.8], [1.0, 2.0, 3.0], m1=[0.0, 0.5, 1.0])
    assert np.allclose(reduced_propensity(law, "s"), law.g)
    assert np.allclose(reduced_propensity(law, "m"), law.g)


def test_reduced_propensity_single_group():
    law = make_law([0.2, 0.3, 0.5], [0.2, 0.5, 0.8], [1.0, 1.0, 1.0], m1=[0.0, 0.0, 0.0])
    eg = float(np.sum(law.p * law.g))
    assert np.allclose(reduced_propensity(law, "s"), eg)


def test_reduced_propensity_two_groups_hand_means():
    law = make_law(
        [0.25, 0.25, 0.5],
        [0.2, 0.4, 0.6],
        [1.0, 1.0, 2.0],  # grouping key via s = m - m1 with m1 = 0
        m1=[0.0, 0.0, 0.0],
    )
    got = reduced_propensity(law, "s")
    assert got[0] == pytest.approx(0.3, abs=1e-15)
    assert got[1] == pytest.approx(0.3, abs=1e-15)
    assert got[2] == pytest.approx(0.6, abs=1e-15)


# ---------------------------------------------------------------------------
# escore_chain
# ---------------------------------------------------------------------------

def test_escore_chain_consistent_outcome_gives_constant():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.1, 1, 5)
    p /= p.sum()
    law = make_law(p, rng.uniform(0.1, 0.9, 5), rng.normal(size=5))
    r1, e1 = escore_chain(law)
    assert np.allclose(r1, 0.0, atol=1e-15)
    assert np.allclose(e1, np.sum(law.p * law.g1), atol=1e-15)


def test_escore_chain_instrument_structure_gives_marginal():
    # product law: axis I drives treatment, axis P drives the outcome bias
    g_levels = [0.2, 0.8]
    bias_levels = [0.5, 1.5]
    p, g, m, m1 = [], [], [], []
    for pi, gi in zip([0.4, 0.6], g_levels):
        for pj, bj in zip([0.3, 0.7], bias_levels):
            p.append(pi * pj)
            g.append(gi)
            m.append(bj)
            m1.append(0.0)
    law = make_law(p, g, m, m1=m1)
    r1, e1 = escore_chain(law)
    # bias independent of g1 level => r1 constant => e-score is P(A=1)
    assert np.allclose(r1, r1[0])
    assert np.allclose(e1, float(np.sum(law.p * law.g)), atol=1e-15)


def test_escore_chain_matches_independent_enumeration():
    rng = np.random.default_rng(42)
    # 4-atom fixture with a deliberate g1 collision
    law = make_law(
        [0.1, 0.2, 0.3, 0.4],
        [0.3, 0.3, 0.6, 0.9],
        [1.0, 2.0, 3.0, 4.0],
        m1=[0.5, 0.4, 2.0, 3.5],
        g1=[0.3, 0.3, 0.6, 0.9],
    )
    r1, e1 = escore_chain(law)
    r1e, e1e = enum_escore_chain(law)
    assert np.allclose(r1, r1e, atol=1e-15)
    assert np.allclose(e1, e1e, atol=1e-15)
    for _ in range(50):
        law = random_law(rng, rng.choice(["g_consistent", "m_consistent", "neither"]))
        r1, e1 = escore_chain(law)
        r1e, e1e = enum_escore_chain(law)
        assert np.allclose(r1, r1e, atol=1e-13)
        assert np.allclose(e1, e1e, atol=1e-13)


# ---------------------------------------------------------------------------
# theorem checks
# ---------------------------------------------------------------------------

def test_theorem2_zero_when_outcome_limit_true():
    rng = np.random.default_rng(1)
    for _ in range(20):
        law = random_law(rng, "m_consistent")
        assert abs(check_theorem2(law)) <= 1e-12
        e_arbitrary = rng.uniform(0.05, 0.95, law.n_atoms)
        assert abs(estimating_equation_mean(law, e_arbitrary, law.m1)) <= 1e-12


def test_theorem2_zero_when_propensity_limit_true():
    rng = np.random.default_rng(2)
    for _ in range(50):
        law = random_law(rng, "g_consistent")
        assert abs(check_theorem2(law)) <= 1e-12


def test_theorem2_fails_off_assumption():
    law = make_law(
        [0.25, 0.25, 0.25, 0.25],
        [0.2, 0.4, 0.6, 0.8],
        [1.0, 2.0, 3.0, 4.0],
        m1=[0.0, 0.0, 1.0, 1.0],
        g1=[0.7, 0.7, 0.2, 0.2],
    )
    assert abs(check_theorem2(law)) > 0.01


def test_theorem1_variants():
    rng = np.random.default_rng(3)
    for _ in range(50):
        law = random_law(rng, "g_consistent")
        assert abs(check_theorem1(law)) <= 1e-12
        # plain double robustness: the true g itself also zeroes the equation
        assert abs(estimating_equation_mean(law, law.g, law.m1)) <= 1e-12
    for _ in range(20):
        law = random_law(rng, "m_consistent")
        assert abs(check_theorem1(law)) <= 1e-12


# ---------------------------------------------------------------------------
# drift term and its exact decomposition
# ---------------------------------------------------------------------------

def test_drift_zero_cases():
    rng = np.random.default_rng(4)
    law = random_law(rng, "neither")
    assert drift_term(law, rng.uniform(0.1, 0.9, law.n_atoms), law.m) == pytest.approx(0.0, abs=1e-15)
    assert drift_term(law, law.g, rng.normal(size=law.n_atoms)) == pytest.approx(0.0, abs=1e-15)


def test_drift_three_atom_hand_value():
    law = make_law([0.5, 0.25, 0.25], [0.4, 0.6, 0.8], [0.1, -0.2, 0.3])
    e_hat = np.full(3, 0.5)
    m_hat = np.zeros(3)
    assert drift_term(law, e_hat, m_hat) == pytest.approx(0.025, abs=1e-15)


def test_drift_bilinear_scaling():
    rng = np.random.default_rng(5)
    law = random_law(rng, "neither")
    e_hat = rng.uniform(0.1, 0.9, law.n_atoms)
    m_hat = rng.normal(size=law.n_atoms)
    base = drift_term(law, e_hat, m_hat)
    # m' - m_hat = 3 (m - m_hat): scaling the outcome gap by c scales beta by c
    scaled_law = DiscreteLaw(law.p, law.g, 3.0 * law.m - 2.0 * m_hat, law.sigma0_sq, law.g1, law.m1)
    scaled = drift_term(scaled_law, e_hat, m_hat)
    assert scaled == pytest.approx(3.0 * base, rel=1e-12)


def test_lemma1_decomposition_trivial_cases():
    rng = np.random.default_rng(6)
    law = random_law(rng, "neither")
    e_hat = rng.uniform(0.1, 0.9, law.n_atoms)
    m_hat = rng.normal(size=law.n_atoms)
    dec = check_lemma1_exact(law, e_hat, law.g, m_hat)
    assert dec.remainder == pytest.approx(0.0, abs=1e-15)
    assert dec.lhs - dec.rhs == pytest.approx(0.0, abs=1e-12)
    dec2 = check_lemma1_exact(law, e_hat, rng.uniform(0.1, 0.9, law.n_atoms), law.m)
    assert dec2.lhs == pytest.approx(0.0, abs=1e-14)
    assert dec2.rhs == pytest.approx(0.0, abs=1e-14)
    assert dec2.remainder == pytest.approx(0.0, abs=1e-14)


def test_lemma1_decomposition_generic_six_atoms():
    rng = np.random.default_rng(7)
    law = random_law(rng, "neither", n_atoms=6)
    law, e_hat, g_hat, m_hat = random_drift_inputs(rng, law)
    dec = check_lemma1_exact(law, e_hat, g_hat, m_hat)
    assert abs(dec.gap) <= 1e-12
    assert abs(dec.tower_mhat_gap) <= 1e-12
    assert abs(dec.tower_m_gap) <= 1e-12


def test_lemma1_towers_hold_even_with_m_hat_collisions():
    rng = np.random.default_rng(8)
    for _ in range(30):
        law = random_law(rng, "neither")
        law2, e_hat, g_hat, m_hat = random_drift_inputs(rng, law, collide_m_hat=True)
        dec = check_lemma1_exact(law2, e_hat, g_hat, m_hat)
        assert abs(dec.gap) <= 1e-12
        assert abs(dec.tower_mhat_gap) <= 1e-12
        assert abs(dec.tower_m_gap) <= 1e-12


def test_exact_q_group_means_by_hand():
    law = make_law([0.25, 0.25, 0.5], [0.2, 0.4, 0.6], [1.0, 1.0, 2.0])
    e_hat = np.array([0.5, 0.5, 0.5])
    g_hat = np.array([0.4, 0.4, 0.4])
    t = law.g * (1 / e_hat - 1 / g_hat)
    q = exact_q(law, e_hat, g_hat, m_hat=np.array([7.0, 7.0, 9.0]))
    expect_group1 = (0.25 * t[0] + 0.25 * t[1]) / 0.5
    assert q[0] == pytest.approx(expect_group1, abs=1e-15)
    assert q[1] == pytest.approx(expect_group1, abs=1e-15)
    assert q[2] == pytest.approx(t[2], abs=1e-15)


# ---------------------------------------------------------------------------
# variance formulas
# ---------------------------------------------------------------------------

def test_efficiency_bound_trivia():
    law = make_law([0.5, 0.5], [1 - 1e-9, 1 - 1e-9], [1.0, 1.0], s2=[3.0, 3.0])
    assert efficiency_bound(law) == pytest.approx(3.0, rel=1e-6)
    law2 = make_law([0.5, 0.5], [0.3, 0.7], [0.0, 2.0], s2=[0.0, 0.0])
    assert efficiency_bound(law2) == pytest.approx(1.0, abs=1e-12)  # Var(m) with mean 1


def test_if0_equals_bound_when_gm_equals_g():
    rng = np.random.default_rng(9)
    for _ in range(20):
        k = int(rng.integers(3, 8))
        p = rng.uniform(0.1, 1, k)
        p /= p.sum()
        law = make_law(p, rng.uniform(0.1, 0.9, k), np.arange(k, dtype=float), s2=rng.uniform(0, 2, k))
        assert if0_variance(law) == pytest.approx(efficiency_bound(law), rel=1e-12)


def test_if0_below_bound_when_m_carries_no_treatment_signal():
    # g averages to P(A=1) within every m-group -> shrink factor g/P(A=1)
    law = make_law(
        [0.25, 0.25, 0.25, 0.25],
        [0.3, 0.7, 0.2, 0.8],
        [1.0, 1.0, 2.0, 2.0],
        s2=[1.0, 1.0, 1.0, 1.0],
    )
    assert if0_variance(law) < efficiency_bound(law)


def test_if0_above_bound_when_sigma_over_g_constant():
    law = make_law(
        [0.25, 0.25, 0.25, 0.25],
        [0.2, 0.6, 0.3, 0.7],
        [1.0, 1.0, 2.0, 2.0],
        s2=[0.2, 0.6, 0.3, 0.7],  # sigma0^2 proportional to g
    )
    assert if0_variance(law) > efficiency_bound(law)


def test_weight_shrink_factor_bounded_by_two():
    rng = np.random.default_rng(10)
    for _ in range(200):
        law = random_law(rng, "neither")
        p_a = float(np.sum(law.p * law.g))
        g_m = reduced_propensity(law, "m")
        factor = 1.0 - (g_m - law.g) / p_a
        small = law.g <= p_a
        assert np.all(factor[small] <= 1.0 + law.g[small] / p_a + 1e-12)
        assert np.all(1.0 + law.g[small] / p_a <= 2.0 + 1e-12)


def test_escore_variance_reduction_property():
    rng = np.random.default_rng(11)
    for _ in range(200):
        law = random_law(rng, rng.choice(["g_consistent", "m_consistent", "neither"]))
        _, e1 = escore_chain(law)
        mean_g1 = float(np.sum(law.p * law.g1))
        mean_e1 = float(np.sum(law.p * e1))
        var_g1 = float(np.sum(law.p * (law.g1 - mean_g1) ** 2))
        var_e1 = float(np.sum(law.p * (e1 - mean_e1) ** 2))
        assert var_e1 <= var_g1 + 1e-12
        assert e1.min() >= law.g1.min() - 1e-12
        assert e1.max() <= law.g1.max() + 1e-12


def test_oracle_fns_bundle_consistency():
    rng = np.random.default_rng(12)
    law = random_law(rng, "g_consistent")
    fns = oracle_fns(law)
    assert fns.theta == pytest.approx(true_theta(law))
    assert np.allclose(fns.s, law.m - law.m1)
    assert np.allclose(fns.e1, escore_chain(law)[1])
    assert fns.sigma_eff_sq == pytest.approx(efficiency_bound(law))
    assert fns.sigma_etmle_sq == pytest.approx(if0_variance(law))


# ---------------------------------------------------------------------------
# randomized sweep plumbing
# ---------------------------------------------------------------------------

def test_identity_suite_passes_and_is_deterministic():
    rep1 = run_identity_suite(n_laws=200, seed=123)
    rep2 = run_identity_suite(n_laws=200, seed=123)
    assert rep1["passed"]
    assert rep1["max_deviation"] <= 1e-12
    assert rep1["deviations"] == rep2["deviations"]


def test_identity_suite_negative_control():
    rep = run_identity_suite(n_laws=50, seed=7, perturb_e1=0.01)
    assert not rep["passed"]
    assert rep["offender"] is not None
    # the reproduction payload round-trips
    DiscreteLaw.from_json(rep["offender"][2])


def test_law_validation():
    with pytest.raises(ValueError):
        make_law([0.5, 0.6], [0.5, 0.5], [0.0, 1.0])
    with pytest.raises(ValueError):
        make_law([0.5, 0.5], [0.0, 0.5], [0.0, 1.0])
    with pytest.raises(ValueError):
        DiscreteLaw([1.0], [0.5], [0.0], [-1.0], [0.5], [0.0])
