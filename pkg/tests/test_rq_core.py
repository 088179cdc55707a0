import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import (
    GAMMA_EPS_001,
    GAMMA_EPS_01,
    GAMMA_EPS_05,
    WORKED_ROOT,
    bisect_quantile,
    gamma_mp,
    thinned_gap_moments,
    weighted_series_moments,
)
from robustpower.primitives import EXPONENTIAL, LOGNORMAL, ApplicationSpec, DistributionSpec, ServerSpec
from robustpower.rq_core import (
    DegenerateAggregateError,
    DomainError,
    InfeasibleSpeedError,
    ServerAggregate,
    StabilityError,
    UncertaintyParams,
    aggregate,
    check_membership_arrival,
    check_membership_workload,
    feasibility_floor,
    gamma_from_epsilon,
    min_feasible_speed,
    min_speed,
    norm_cdf,
    norm_isf,
    norm_ppf,
    quadratic_coeffs,
    response_time_bound,
    sla_quadratic,
    superpose,
    thin,
)


def _agg(lb=1.0, ga=1.0, gs=1.0, om=0.5, mu_inv=0.5):
    return ServerAggregate(lb, ga, mu_inv, gs, gs, om, 1.0)


def _server(lo=0.01, hi=100.0):
    return ServerSpec(1, lo, hi, 0.0, 1.0, {1}, 10.0, 0.1)


# -- service-level constant ----------------------------------------------------

@pytest.mark.parametrize("eps,expected", [(0.01, GAMMA_EPS_001), (0.1, GAMMA_EPS_01), (0.5, GAMMA_EPS_05)])
def test_gamma_frozen_values(eps, expected):
    assert gamma_from_epsilon(eps) == pytest.approx(expected, abs=1e-10)


def test_gamma_symmetry_point():
    assert abs(gamma_from_epsilon(0.75)) < 1e-12


@given(st.floats(1e-9, 1 - 1e-9))
def test_gamma_matches_mpmath(eps):
    g = gamma_from_epsilon(eps)
    assert abs(norm_cdf(g) - math.sqrt(1 - eps)) < 1e-10
    assert g == pytest.approx(gamma_mp(eps), abs=1e-8)


@given(st.floats(1e-300, 0.999))
def test_ppf_against_bisection(q):
    assert norm_ppf(q) == pytest.approx(bisect_quantile(q), abs=1e-8)


@given(st.floats(1e-300, 0.5))
def test_ppf_symmetry(q):
    assert norm_ppf(q) == -norm_isf(q)


@given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999))
def test_gamma_monotone(e1, e2):
    assume(abs(e1 - e2) > 1e-9)
    lo, hi = sorted((e1, e2))
    assert gamma_from_epsilon(lo) > gamma_from_epsilon(hi)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
def test_gamma_domain(eps):
    with pytest.raises(DomainError):
        gamma_from_epsilon(eps)


def test_ppf_domain():
    for q in (0.0, 1.0):
        with pytest.raises(DomainError):
            norm_ppf(q)


# -- membership ----------------------------------------------------------------

def test_arrival_membership_mean_sequence():
    assert check_membership_arrival([0.5] * 7, UncertaintyParams(2.0, 0.1, 1.0)) == (True, None)


def test_arrival_membership_all_zero_gaps():
    assert check_membership_arrival([0, 0, 0], UncertaintyParams(1.0, 0.1, 1.0)) == (False, 1)


def test_workload_membership():
    p = UncertaintyParams(2.0, 0.3, 1.0)
    assert check_membership_workload([0.5] * 5, p) == (True, None)
    assert check_membership_workload([0.5 + 2 * 0.3], p) == (False, ("n", 1))


def test_membership_empty():
    with pytest.raises(DomainError):
        check_membership_arrival([], UncertaintyParams(1.0, 1.0, 1.0))


# -- thinning ------------------------------------------------------------------

def test_thin_identity(farm):
    a = farm.applications[0]
    t = thin(a, 1.0)
    assert (t.rate, t.sigma) == (a.arrival_rate, a.sigma_a)


def test_thin_app1_half():
    a = ApplicationSpec(1, DistributionSpec(LOGNORMAL, 0.25, 2.0), DistributionSpec(LOGNORMAL, 5.0, 1.5))
    t = thin(a, 0.5)
    assert t.rate == 2.0
    assert t.sigma == pytest.approx(0.25 * math.sqrt(2) / math.sqrt(0.75), rel=1e-12)
    assert t.sigma == pytest.approx(0.4082, abs=1e-4)
    assert t.sigma**2 / a.sigma_a**2 == pytest.approx(4 / 3, rel=1e-12)


@pytest.mark.parametrize("p", [0.0, -0.2, 1.1])
def test_thin_domain(farm, p):
    with pytest.raises(DomainError):
        thin(farm.applications[0], p)


@pytest.mark.parametrize("p", [0.2, 0.5, 0.9])
def test_thinning_series_representation(p):
    # the thinning variance formula is the variance of sum_k T_k (1-p)^(k-1)
    d = DistributionSpec(LOGNORMAL, 0.25, 2.0)
    m = weighted_series_moments(d, p, 200_000, np.random.default_rng(11))
    assert abs(m.mean - d.mean / p) < 3 * m.mean_se
    assert abs(m.var - d.variance / (p * (2 - p))) < 3 * m.var_se


@pytest.mark.parametrize("p", [0.2, 0.5, 0.9])
def test_geometric_thinning_of_renewal_stream(p):
    """Real Bernoulli thinning: mean gap 1/(lambda p); variance of a geometric compound sum."""
    d = DistributionSpec(LOGNORMAL, 0.25, 2.0)
    m = thinned_gap_moments(d, p, 1_000_000, np.random.default_rng(12))
    assert abs(m.mean - d.mean / p) < 3 * m.mean_se
    compound = d.variance / p + (1 - p) / p**2 * d.mean**2
    assert abs(m.var - compound) < 3 * m.var_se


# -- superposition ---------------------------------------------------------------

def test_superpose_single_flow(farm):
    a = farm.applications[1]
    agg = superpose([(a, 1.0)], 1.7)
    assert agg.gamma_a_bar == pytest.approx(1.7 * a.sigma_a, rel=1e-12)
    assert agg.mu_bar_inv == pytest.approx(a.mean_work, rel=1e-12)
    assert agg.sigma_s_bar == pytest.approx(a.sigma_s, rel=1e-12)
    assert agg.omega_bar == pytest.approx(a.omega, rel=1e-12)


def test_superpose_two_identical_flows():
    a = ApplicationSpec(1, DistributionSpec(EXPONENTIAL, 1.0, 1.0), DistributionSpec(LOGNORMAL, 1.0, 1.0))
    agg = superpose([(a, 0.5), (a, 0.5)], 1.0)
    assert agg.lambda_bar == pytest.approx(1.0)
    assert agg.gamma_a_bar == pytest.approx(math.sqrt(2 / 3), rel=1e-12)


def test_superpose_workload_mixture():
    w1 = DistributionSpec(LOGNORMAL, 2.0, 0.25)   # variance 1
    w2 = DistributionSpec(LOGNORMAL, 4.0, 1 / 16)  # variance 1
    gap = DistributionSpec(EXPONENTIAL, 1.0, 1.0)
    agg = superpose([(ApplicationSpec(1, gap, w1), 1.0), (ApplicationSpec(2, gap, w2), 1.0)], 1.0)
    assert agg.mu_bar_inv == pytest.approx(3.0, rel=1e-12)
    assert agg.sigma_s_bar**2 == pytest.approx(2.0, rel=1e-12)
    # mixture sampling cross-check
    rng = np.random.default_rng(3)
    n = 2_000_000
    pick = rng.random(n) < 0.5
    x = np.where(pick, w1.sample(rng, n), w2.sample(rng, n))
    assert abs(x.mean() - 3.0) < 3 * x.std() / math.sqrt(n)
    assert abs(x.var() - 2.0) < 3 * math.sqrt(np.var((x - 3.0) ** 2) / n)


def test_superpose_degenerate(farm):
    with pytest.raises(DegenerateAggregateError):
        superpose([(farm.applications[0], 0.0)], 1.0)


def test_aggregate_matches_superpose(farm):
    arr = farm.arrays()
    rng = np.random.default_rng(5)
    mask = farm.mask()
    P = rng.random(mask.shape) * mask
    P /= P.sum(axis=1, keepdims=True)
    agg = aggregate(P, arr["lam"], arr["scov_a"], arr["mean_work"], arr["sigma_s"], 2.0)
    for j in range(farm.n_servers):
        ref = superpose([(a, P[i, j]) for i, a in enumerate(farm.applications)], 2.0)
        for key in ("lambda_bar", "gamma_a_bar", "mu_bar_inv", "gamma_s_bar", "omega_bar"):
            assert agg[key][j] == pytest.approx(getattr(ref, key), rel=1e-12)
    assert np.allclose(agg["omega_bar"], arr["omega"] @ P)


# -- bound and quadratic -----------------------------------------------------------

def test_bound_example():
    assert response_time_bound(_agg(), 1.0) == pytest.approx(5.5, rel=1e-15)


def test_bound_limit():
    agg = _agg(lb=2.0, ga=0.3)
    assert response_time_bound(agg, 1e12) == pytest.approx(2.0 * 0.09 / 2 + 1.0, rel=1e-9)


def test_bound_stability():
    with pytest.raises(StabilityError):
        response_time_bound(_agg(), 0.5)


def test_quadratic_worked_example():
    q = sla_quadratic(_agg(), 10.0)
    assert (q.a, q.b, q.c) == (-15.0, 9.0, 1.5)
    x = min_feasible_speed(q, _server())
    assert x == pytest.approx(WORKED_ROOT, rel=1e-12)
    assert abs(q(x)) < 1e-12
    assert response_time_bound(_agg(), x) == pytest.approx(10.0, rel=1e-6)


def test_zero_threshold_unsatisfiable():
    q = sla_quadratic(_agg(), 0.0)
    assert q.a > 0 and q.c > 0
    with pytest.raises(InfeasibleSpeedError):
        min_feasible_speed(q, _server())


def test_zero_variability_reduction():
    lb, om, delta = 2.0, 0.7, 3.0
    a, b, c = quadratic_coeffs(lb, 0.0, 0.0, om, delta)
    assert (a, b, c) == (4 - 2 * lb * delta, 2 * om * (lb * delta - 3), 2 * om**2)


def test_required_speed_above_box():
    q = sla_quadratic(_agg(), 10.0)
    with pytest.raises(InfeasibleSpeedError) as exc:
        min_feasible_speed(q, _server(lo=0.01, hi=0.5))
    assert exc.value.required_speed == pytest.approx(WORKED_ROOT, rel=1e-12)


def test_speed_floor_clamp():
    q = sla_quadratic(_agg(), 10.0)
    assert min_feasible_speed(q, _server(lo=2.0, hi=5.0)) == 2.0


aggregates = st.tuples(
    st.floats(0.2, 20.0),   # lambda_bar
    st.floats(0.0, 2.0),    # gamma_a_bar * lambda_bar
    st.floats(0.0, 5.0),    # gamma_s_bar
    st.floats(0.05, 20.0),  # omega_bar
    st.floats(1.0, 50.0),   # delta * lambda_bar
)


@settings(max_examples=300)
@given(aggregates)
def test_root_reproduces_threshold(t):
    lb, ga_l, gs, om, dl = t
    ga, delta = ga_l / lb, dl / lb
    a, b, c = quadratic_coeffs(lb, ga, gs, om, delta)
    x, req = min_speed(a, b, c, om, 1e-6, 1e9)
    assume(np.isfinite(x) and x == req)
    from robustpower.rq_core import bound_values

    assert bound_values(lb, ga, gs, om, x) == pytest.approx(delta, rel=1e-6)
    # concave: feasible for every larger speed; convex: only up to the upper root
    upper = math.inf if a <= 0 else (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    for y in (x * 1.001, x * 1.5, x * 10):
        if y <= upper:
            assert bound_values(lb, ga, gs, om, y) <= delta * (1 + 1e-9)


@given(aggregates, st.floats(1.0001, 100.0))
def test_floor_below_bound(t, scale):
    lb, ga_l, gs, om, _ = t
    agg = _agg(lb, ga_l / lb, gs, om)
    x = om * scale
    assert feasibility_floor(agg, x) <= response_time_bound(agg, x) * (1 + 1e-12)


def test_floor_limit_and_app1():
    agg = _agg(lb=3.0, ga=0.4, gs=1.0, om=2.0)
    assert feasibility_floor(agg, 1e12) == pytest.approx(0.8, rel=1e-9)
    a = ApplicationSpec(1, DistributionSpec(LOGNORMAL, 0.25, 2.0), DistributionSpec(LOGNORMAL, 5.0, 1.5))
    single = superpose([(a, 1.0)], gamma_from_epsilon(0.1))
    assert feasibility_floor(single, 1e12) == pytest.approx(2 * GAMMA_EPS_01 * 0.25 * math.sqrt(2), rel=1e-9)
