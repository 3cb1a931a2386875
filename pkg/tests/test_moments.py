"""Exact moment identities, renewal consistency, and estimator self-tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polymerlab import moments as M
from polymerlab.environment import DisorderLaw, reference_law
from polymerlab.errors import CapacityError, NoTransitionError
from polymerlab.lattice import PolymerConfig
from polymerlab.oracle import enumerate_moments

LAW = reference_law()


# ---------------------------------------------------------------------------
# walk tables
# ---------------------------------------------------------------------------


def test_return_curve_d1_closed_form():
    r = M._return_curve(1, 6)
    # C(2j, j) 4^-j
    expect = [math.comb(2 * j, j) / 4.0 ** j for j in range(7)]
    assert np.allclose(r, expect, rtol=1e-15, atol=0)


def test_return_curve_d2_is_squared_d1():
    b = M._central_binomials(40)
    assert np.array_equal(M._return_curve(2, 40), b * b)


def _brute_return_prob(d, j):
    """P(SRW_{2j} = 0) by exact distribution propagation."""
    from collections import Counter
    steps = []
    for ax in range(d):
        for s in (1, -1):
            e = [0] * d
            e[ax] = s
            steps.append(tuple(e))
    dist = Counter({(0,) * d: 1.0})
    for _ in range(2 * j):
        nxt = Counter()
        for pos, pr in dist.items():
            for e in steps:
                nxt[tuple(p + q for p, q in zip(pos, e))] += pr / (2 * d)
        dist = nxt
    return dist[(0,) * d]


@pytest.mark.parametrize("d", [3, 4])
def test_return_curve_convolution_vs_brute_force(d):
    r = M._return_curve(d, 3)
    for j in (1, 2, 3):
        assert r[j] == pytest.approx(_brute_return_prob(d, j), rel=1e-13)


def test_first_return_d1_closed_form():
    # first return of the 1-d walk at time 2j: C(2j, j) / (2j - 1) / 4^j
    _, f = M._walk_tables(1, 8)
    for j in range(1, 9):
        expect = math.comb(2 * j, j) / (2 * j - 1) / 4.0 ** j
        assert f[j] == pytest.approx(expect, rel=1e-13)


def test_return_probability_one_step():
    rp = M.return_probability(3, 1)
    assert rp.truncated == pytest.approx(1.0 / 6.0, rel=1e-12)


def test_return_probability_truncated_monotone():
    vals = [M.return_probability(3, T).truncated for T in (8, 32, 128, 512)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_return_probability_matches_known_constant():
    # d = 3 return probability, 0.3405373295...
    rp = M.return_probability(3, 2048)
    assert rp.extrapolated == pytest.approx(0.3405373295, abs=2e-6)
    # extrapolation stable under doubling
    rp2 = M.return_probability(3, 1024)
    assert abs(rp2.extrapolated - rp.extrapolated) < 2e-5


def test_return_probability_recurrent_dimensions():
    assert M.return_probability(1, 64).extrapolated == 1.0
    assert M.return_probability(2, 64).extrapolated == 1.0
    assert M.return_probability(2, 64).truncated < 1.0


def test_return_probability_guards():
    with pytest.raises(ValueError):
        M.return_probability(0, 16)
    with pytest.raises(ValueError):
        M.return_probability(3, 0)


# ---------------------------------------------------------------------------
# exact second moment
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2, 3, 4])
@pytest.mark.parametrize("method", ["dp", "renewal"])
def test_second_moment_one_step_closed_form(d, method):
    beta = 0.7
    m2 = M._pair_multiplier(beta, LAW)
    got = M.exact_second_moment(d, 1, beta, LAW, method)
    assert got == pytest.approx(1.0 + (m2 - 1.0) / (2 * d), rel=1e-14)


def test_second_moment_beta_zero_is_exactly_one():
    assert M.exact_second_moment(3, 12, 0.0, LAW) == 1.0


@pytest.mark.parametrize("d,n", [(1, 4), (1, 9), (2, 6), (3, 5)])
@pytest.mark.parametrize("beta", [0.3, 0.9])
def test_second_moment_dp_equals_renewal(d, n, beta):
    a = M.second_moment_curve(d, n, beta, LAW, "dp")
    b = M.second_moment_curve(d, n, beta, LAW, "renewal")
    assert np.allclose(a, b, rtol=1e-12, atol=0)


@pytest.mark.parametrize("d,n_max", [(1, 6), (2, 3)])
def test_second_moment_matches_enumeration(d, n_max):
    for n in range(1, n_max + 1):
        for beta in (0.4, 1.1):
            want = enumerate_moments(d, n, beta, LAW, k=2)
            got = M.exact_second_moment(d, n, beta, LAW)
            assert got == pytest.approx(want, rel=1e-12), (d, n, beta)


def test_second_moment_other_laws():
    uni = DisorderLaw.uniform(-1.0, 1.0)
    gau = DisorderLaw.gaussian(0.0, 1.0)
    for law in (uni, gau):
        want = enumerate_moments(1, 4, 0.8, law, k=2)
        assert M.exact_second_moment(1, 4, 0.8, law) == pytest.approx(
            want, rel=1e-12)


def test_second_moment_renewal_overflow_is_honest_inf():
    curve = M.second_moment_curve(1, 3000, 3.0, LAW, "renewal")
    assert np.isfinite(curve[:50]).all()
    assert np.isinf(curve[-1])
    # finite part still correct where dp is affordable
    dp = M.second_moment_curve(1, 20, 3.0, LAW, "dp")
    assert np.allclose(curve[:21], dp, rtol=1e-12, atol=0)


def test_second_moment_dp_capacity():
    with pytest.raises(CapacityError):
        M._second_moment_dp(4, 30, 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8),
       st.floats(0.05, 1.5, allow_nan=False))
def test_second_moment_methods_agree_property(d, n, beta):
    a = M.exact_second_moment(d, n, beta, LAW, "dp")
    b = M.exact_second_moment(d, n, beta, LAW, "renewal")
    assert a == pytest.approx(b, rel=1e-12)


def test_submultiplicative_in_n():
    phi = M.second_moment_curve(3, 24, 1.0, LAW)
    for n in range(25):
        for m in range(25 - n):
            assert phi[n + m] <= phi[n] * phi[m] * (1 + 1e-12)


def test_doubling_rates_nonincreasing():
    for beta in (0.5, 2.5):
        c = M.second_moment_curve(3, 64, beta, LAW, "renewal")
        rates = [math.log(c[n]) / n for n in (8, 16, 32, 64)]
        assert all(rates[i + 1] <= rates[i] + 1e-15 for i in range(3))


# ---------------------------------------------------------------------------
# higher moments
# ---------------------------------------------------------------------------


def test_kth_moment_first_is_one():
    assert M.exact_kth_moment(3, 7, 1.3, LAW, 1) == 1.0


def test_kth_moment_second_delegates():
    a = M.exact_kth_moment(2, 5, 0.8, LAW, 2)
    b = M.exact_second_moment(2, 5, 0.8, LAW)
    assert a == b


@pytest.mark.parametrize("d,n_max", [(1, 4), (2, 2)])
def test_third_moment_matches_enumeration(d, n_max):
    for n in range(1, n_max + 1):
        want = enumerate_moments(d, n, 0.6, LAW, k=3)
        got = M.exact_kth_moment(d, n, 0.6, LAW, 3)
        assert got == pytest.approx(want, rel=1e-12), (d, n)


def test_third_moment_beta_zero():
    assert M.exact_kth_moment(1, 5, 0.0, LAW, 3) == 1.0


def test_third_moment_dominates_power_mean():
    # (E W^3)^(1/3) >= (E W^2)^(1/2)
    m2 = M.exact_second_moment(1, 6, 0.9, LAW)
    m3 = M.exact_kth_moment(1, 6, 0.9, LAW, 3)
    assert m3 ** (1 / 3) >= m2 ** 0.5 * (1 - 1e-13)


def test_kth_moment_guards():
    with pytest.raises(CapacityError):
        M.exact_kth_moment(3, 10, 0.5, LAW, 3)
    with pytest.raises(ValueError):
        M.exact_kth_moment(1, 4, 0.5, LAW, 4)


# ---------------------------------------------------------------------------
# growth rate and critical temperature
# ---------------------------------------------------------------------------


def test_growth_rate_subcritical():
    gr = M.second_moment_growth_rate(3, 0.5, LAW, n=1024)
    assert not gr["supercritical"]
    assert abs(gr["rate"]) < gr["threshold"]


def test_growth_rate_supercritical_matches_exact_a2():
    beta = 2.4859
    a2 = M.exact_a2(3, beta, LAW)
    gr = M.second_moment_growth_rate(3, beta, LAW, n=4096)
    assert gr["supercritical"]
    assert gr["rate"] == pytest.approx(a2, rel=1e-10)


def test_exact_a2_zero_in_subcritical_phase():
    assert M.exact_a2(3, 0.5, LAW) == 0.0
    assert M.exact_a2(3, 1.9, LAW) == 0.0


def test_exact_a2_positive_supercritical_and_monotone():
    a = M.exact_a2(3, 2.2, LAW)
    b = M.exact_a2(3, 2.6, LAW)
    assert 0.0 < a < b


def test_exact_a2_recurrent_dimension_positive_for_any_beta():
    assert M.exact_a2(1, 0.3, LAW) > 0.0
    assert M.exact_a2(2, 0.3, LAW) > 0.0


def test_growth_rate_guards():
    with pytest.raises(ValueError):
        M.second_moment_growth_rate(3, 0.5, LAW, n=100)  # not a power of two


def test_beta_crit_value_and_bracket():
    bc = M.beta_crit_L2(3, LAW)
    assert bc.beta_hat == pytest.approx(1.98904, abs=5e-4)
    assert bc.g_lo < 0.0 < bc.g_hi
    assert bc.p_return == pytest.approx(0.34054, abs=1e-4)


def test_beta_crit_recurrent_dimension_raises():
    with pytest.raises(NoTransitionError):
        M.beta_crit_L2(2, LAW)


def test_beta_crit_symmetric_two_point_has_no_root():
    # sup of lmgf(2b) - 2 lmgf(b) for the symmetric +-1 law is log 2,
    # below -log p_return(3) = 1.077, so no transition exists
    sym = DisorderLaw.two_point(0.5, -1.0, 1.0)
    with pytest.raises(NoTransitionError):
        M.beta_crit_L2(3, sym)


def test_growth_point_cross_validates_beta_crit():
    bA = M.beta_crit_L2(3, LAW).beta_hat
    bB = M.l2_growth_point(3, LAW, tol=5e-3, n=2048)
    assert abs(bA - bB) < 0.06


def test_growth_point_recurrent_dimension_raises():
    with pytest.raises(NoTransitionError):
        M.l2_growth_point(1, LAW)


# ---------------------------------------------------------------------------
# Monte Carlo moment estimates
# ---------------------------------------------------------------------------


def test_mc_moment_p_zero_exact():
    cfg = PolymerConfig(2, 6, 0.5, LAW)
    est = M.mc_moment(cfg, 0.0, reps=2000)
    assert est.rate == 0.0 and est.se == 0.0


def test_mc_moment_reps_guard():
    cfg = PolymerConfig(2, 6, 0.5, LAW)
    with pytest.raises(ValueError):
        M.mc_moment(cfg, 2.0, reps=100)


def test_mc_moment_beta_zero_rate_is_zero():
    cfg = PolymerConfig(2, 6, 0.0, LAW)
    est = M.mc_moment(cfg, 2.0, reps=1000, base_seed=4)
    assert est.rate == pytest.approx(0.0, abs=1e-13)
    assert not est.heavy_tail


def test_mc_moment_consistent_with_exact():
    cfg = PolymerConfig(3, 8, 0.5, LAW)
    est = M.mc_moment(cfg, 2.0, reps=2000, base_seed=11)
    exact = math.log(M.exact_second_moment(3, 8, 0.5, LAW)) / 8
    assert abs(est.rate - exact) < 4 * est.se
    assert est.ci[0] < est.rate < est.ci[1]


def test_mc_moment_deterministic_and_stream_sensitive():
    cfg = PolymerConfig(1, 6, 0.8, LAW)
    a = M.mc_moment(cfg, 2.0, reps=1000, base_seed=9)
    b = M.mc_moment(cfg, 2.0, reps=1000, base_seed=9)
    c = M.mc_moment(cfg, 2.0, reps=1000, base_seed=9, stream=1)
    assert a == b
    assert a.rate != c.rate


def test_mc_moment_heavy_tail_flag():
    cfg = PolymerConfig(1, 4, 0.5, LAW)
    logw = np.zeros(1000)
    logw[0] = 50.0  # one sample carries the whole p = 2 sum
    est = M.mc_moment(cfg, 2.0, reps=1000, logw=logw)
    assert est.heavy_tail and est.top_share > 0.99


def test_mc_moment_explicit_n_override():
    cfg = PolymerConfig(1, 12, 0.8, LAW)
    a = M.mc_moment(cfg, 2.0, n=6, reps=1000, base_seed=2)
    cfg6 = PolymerConfig(1, 6, 0.8, LAW)
    b = M.mc_moment(cfg6, 2.0, reps=1000, base_seed=2)
    assert a == b


# ---------------------------------------------------------------------------
# moment curves and q*
# ---------------------------------------------------------------------------


def test_extrapolation_recovers_linear_model():
    n_grid = (4, 8, 16, 32)
    A, B = 0.37, -1.4
    row = np.array([A + B / n for n in n_grid])
    got, se = M._extrapolate_rates(n_grid, row, np.zeros(4))
    assert got == pytest.approx(A, abs=1e-12)
    assert se == 0.0


@pytest.fixture(scope="module")
def small_curve():
    return M.build_moment_curve(1, 1.0, LAW, [1.0, 1.5, 2.0, 2.5],
                                (4, 8, 16), 400, base_seed=3)


def test_curve_shapes_and_reports(small_curve):
    c = small_curve
    assert c.rates.shape == (4, 3) and c.ses.shape == (4, 3)
    assert np.isfinite(c.rates).all()
    # deterministic build: reports are stable, and this seed has none
    assert c.invariant_report() == []
    assert c.convexity_report() == []


def test_qstar_refinement_uses_fresh_samples(small_curve):
    qs = M.estimate_qstar(small_curve, tol=0.02, refine_steps=2,
                          refine_reps=400)
    assert not qs.above_grid and not qs.below_grid
    assert qs.bracket[0] >= 1.0 and qs.bracket[1] <= 1.5
    assert len(qs.refined_points) == 2
    assert qs.ci[0] <= qs.q_hat <= qs.ci[1]


def test_qstar_below_grid_flag(small_curve):
    qs = M.estimate_qstar(small_curve, tol=1e-4)
    assert qs.below_grid and qs.q_hat == 1.0


def test_qstar_synthetic_kink():
    p = np.arange(1.0, 2.51, 0.1)
    a = np.maximum(0.0, p - 1.7)
    qs = M.estimate_qstar(M.synthetic_moment_curve(p, a), tol=1e-9)
    assert abs(qs.q_hat - 1.7) <= 0.1 + 1e-9
    assert not qs.above_grid


def test_qstar_flat_curve_is_above_grid():
    p = np.arange(1.0, 2.51, 0.1)
    qs = M.estimate_qstar(M.synthetic_moment_curve(p, np.zeros_like(p)),
                          tol=1e-3)
    assert qs.above_grid
    assert math.isnan(qs.q_hat)
    assert qs.ci[1] == float("inf")


# ---------------------------------------------------------------------------
# tail exponent p* and xi
# ---------------------------------------------------------------------------


def test_pstar_synthetic_pareto():
    rng = np.random.default_rng(7)
    # P(X > t) = t^-2.5: X = U^(-1/2.5)
    sup_log = -np.log(rng.random(200_000)) / 2.5
    cfg = PolymerConfig(3, 8, 0.5, LAW)
    ps = M.estimate_pstar(cfg, (2.0, 4.0, 8.0), 0, sup_samples=sup_log)
    assert ps.p_hat == pytest.approx(2.5, abs=0.1)
    assert ps.ci[0] < ps.p_hat < ps.ci[1]
    assert not ps.unestimable


def test_pstar_degenerate_tail_unestimable():
    cfg = PolymerConfig(3, 8, 0.0, LAW)
    ps = M.estimate_pstar(cfg, (2.0, 4.0, 8.0), 0,
                          sup_samples=np.zeros(100))
    assert ps.unestimable
    assert math.isnan(ps.p_hat)


def test_pstar_real_run_fields():
    cfg = PolymerConfig(1, 8, 1.0, LAW)
    ps = M.estimate_pstar(cfg, (1.5, 2.0, 3.0), 500, base_seed=5)
    assert ps.p_hat > 0 and not ps.unestimable
    assert len(ps.counts) == 3 and ps.counts[0] >= ps.counts[-1]
    assert ps.floor_ok is not None  # bounded law: floor was checked
    assert len(ps.floor_margin) == 3
    assert not math.isnan(ps.p_hat_half)
    # deterministic
    ps2 = M.estimate_pstar(cfg, (1.5, 2.0, 3.0), 500, base_seed=5)
    assert ps.p_hat == ps2.p_hat


def test_pstar_threshold_guard():
    cfg = PolymerConfig(1, 8, 1.0, LAW)
    with pytest.raises(ValueError):
        M.estimate_pstar(cfg, (0.0, 2.0, 4.0), 10, sup_samples=np.ones(5))


def test_xi_exact_values():
    assert M.xi_from_pstar(3, 2.0) == 0.25
    assert M.xi_from_pstar(4, 2.0) == 0.5
    for d in (1, 2, 3, 4):
        assert M.xi_from_pstar(d, 1.0 + 2.0 / d) == 0.0


def test_xi_monotone_in_pstar():
    vals = [M.xi_from_pstar(3, p) for p in (1.2, 1.5, 2.0, 3.0, 10.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1.5  # approaches d/2 from below


def test_xi_domain_guard():
    with pytest.raises(ValueError):
        M.xi_from_pstar(3, 0.8)


# ---------------------------------------------------------------------------
# fluctuation-field intensity
# ---------------------------------------------------------------------------


def test_gff_beta_zero_is_zero():
    g = M.gff_intensity(3, 0.0, LAW)
    assert g.gamma == 0.0 and not g.diverged


def test_gff_monotone_toward_edge():
    g1 = M.gff_intensity(3, 0.3, LAW)
    g2 = M.gff_intensity(3, 0.45, LAW)
    assert 0.0 < g1.gamma < g2.gamma
    assert g1.converged and g2.converged


def test_gff_divergence_flags():
    assert M.gff_intensity(3, 2.5, LAW).diverged
    assert M.gff_intensity(2, 0.5, LAW).diverged


def test_gff_limit_matches_renewal_curve():
    g = M.gff_intensity(3, 0.5, LAW)
    phi = M.second_moment_curve(3, 4096, 0.5, LAW, "renewal")
    assert phi[-1] == pytest.approx(g.second_moment_limit, rel=1e-3)
