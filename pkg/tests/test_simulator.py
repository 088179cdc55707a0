import math

import numpy as np
import pytest

from robustpower import _engine as eng
from robustpower.primitives import (
    EXPONENTIAL,
    LOGNORMAL,
    ApplicationSpec,
    ConfigError,
    DistributionSpec,
    ServerSpec,
    StaticPolicy,
    SystemSpec,
    power,
)
from robustpower.simulator import (
    SimulationError,
    _Stream,
    empirical_tail,
    ps_sojourn_reference,
    simulate,
    simulate_coupled_disciplines,
    wilson_interval,
)


def mm1(rho, x=2.0):
    """One Poisson application with unit-mean exponential work on one server pinned at speed x."""
    lam = rho * x
    app = ApplicationSpec(1, DistributionSpec(EXPONENTIAL, 1 / lam, 1.0), DistributionSpec(EXPONENTIAL, 1.0, 1.0))
    srv = ServerSpec(1, x, x + 1, 10.0, 1.0, {1}, 4.0, 0.01)
    return SystemSpec([app], [srv]), StaticPolicy([[1.0]], [x])


def two_server_farm():
    w = DistributionSpec(LOGNORMAL, 0.4, 1.5)
    apps = [ApplicationSpec(1, DistributionSpec(LOGNORMAL, 0.5, 2.0), w),
            ApplicationSpec(2, DistributionSpec(EXPONENTIAL, 0.25, 1.0), w)]
    servers = [ServerSpec(1, 1, 10, 50, 0.5, {1, 2}, 4, 0.01), ServerSpec(2, 2, 12, 80, 0.3, {2}, 4, 0.01)]
    return SystemSpec(apps, servers), StaticPolicy([[1.0, 0.0], [0.3, 0.7]], [3.0, 2.5])


# -- kernels --------------------------------------------------------------------

def test_three_job_trace():
    s_ps, s_fcfs = simulate_coupled_disciplines([0.0, 1.0, 1.0], [3.0, 1.0, 1.0], 1.0)
    assert s_fcfs.tolist() == [3.0, 3.0, 3.0]
    # by hand: job 2 leaves at 3.5, job 3 at 4.5, job 1 at 5
    assert np.allclose(s_ps, [5.0, 2.5, 2.5], rtol=0, atol=1e-12)
    ref, _ = ps_sojourn_reference([0.0, 1.0, 2.0], [3.0, 1.0, 1.0], 1.0)
    assert np.allclose(ref, s_ps, atol=1e-12)


def test_single_job():
    s_ps, s_fcfs = simulate_coupled_disciplines([2.0], [3.0], 1.5)
    assert s_ps[0] == s_fcfs[0] == 2.0


@pytest.mark.parametrize("seed,rho", [(0, 0.3), (1, 0.7), (2, 0.95)])
def test_kernel_matches_reference(seed, rho):
    rng = np.random.default_rng(seed)
    n = 2000
    gaps = rng.exponential(1.0, n)
    work = rng.lognormal(0, 1, n)
    speed = work.mean() / rho
    kern, _ = simulate_coupled_disciplines(gaps, work, speed)
    ref, log = ps_sojourn_reference(np.cumsum(gaps), work, speed)
    assert np.allclose(kern, ref, rtol=1e-9, atol=1e-9)
    assert all(n_sys == counter for _, n_sys, counter in log)


def test_sojourn_at_least_work_over_speed():
    rng = np.random.default_rng(4)
    gaps, work = rng.exponential(1.0, 10_000), rng.exponential(0.8, 10_000)
    s_ps, _ = simulate_coupled_disciplines(gaps, work, 1.0)
    # absolute slack: the virtual clock carries ~1e-13 absolute rounding
    assert np.all(s_ps >= work - 1e-9)


def test_fcfs_lindley_recursion():
    rng = np.random.default_rng(9)
    gaps, work = rng.exponential(1.0, 500), rng.exponential(0.7, 500)
    _, s = simulate_coupled_disciplines(gaps, work, 1.2)
    w = 0.0
    for k in range(500):
        w = max(0.0, w - gaps[k]) if k else 0.0
        assert s[k] == pytest.approx(w + work[k] / 1.2, rel=1e-12)
        w += work[k] / 1.2


def test_number_in_system_bookkeeping():
    rng = np.random.default_rng(2)
    arrivals = np.cumsum(rng.exponential(1.0, 5000))
    works = rng.exponential(0.9, 5000)
    fs = np.zeros(eng.N_FSTATE)
    stats = np.zeros(eng.N_STATS)
    tags, arr, work = (np.empty(5001) for _ in range(3))
    params = np.array([1.0, 1.0, 0.0, np.inf, 1.0, 1.0, 4.0])
    n = 0
    for lo in range(0, 5000, 250):
        n, _ = eng.ps_run(fs, tags, arr, work, n, arrivals[lo:lo + 250], works[lo:lo + 250], 1.0,
                          stats, np.empty(0), 0, params, np.empty(0), 0.0, False)
        assert n == lo + 250 - int(stats[eng.N_JOBS])
    n, _ = eng.ps_run(fs, tags, arr, work, n, np.empty(0), np.empty(0), 1.0,
                      stats, np.empty(0), 0, params, np.empty(0), 0.0, True)
    assert n == 0 and stats[eng.N_JOBS] == 5000
    assert fs[eng.WORK_DONE] == pytest.approx(works.sum(), rel=1e-12)


# -- farm simulation ---------------------------------------------------------------

def test_work_conservation_and_energy_identity():
    system, policy = two_server_farm()
    rep = simulate(system, policy, horizon=5000.0, warmup=500.0, replications=3, seed=1)
    assert rep.work_done + rep.work_left == pytest.approx(rep.work_in, rel=1e-6)
    for s, spec, x in zip(rep.servers, system.servers, policy.speeds):
        u = s.utilization
        expected = u * power(spec, x) + (1 - u) * power(spec, spec.speed_min)
        assert s.avg_power == pytest.approx(expected, rel=1e-9)
        assert spec.speed_min <= s.mean_speed <= x
        assert s.avg_power >= power(spec, spec.speed_min)
        assert 0 <= s.violation_prob <= 1


def test_routing_law_of_large_numbers():
    system, policy = two_server_farm()
    app = system.applications[1]
    cum = np.cumsum(policy.routing[1])
    st = _Stream(app, cum, np.random.default_rng(0), np.random.default_rng(1), 4096)
    _, _, srv = st.take(50_000.0)
    n = srv.size
    frac = np.count_nonzero(srv == 0) / n
    assert abs(frac - 0.3) < 3 * math.sqrt(0.3 * 0.7 / n)


def test_job_counts_follow_routing():
    system, policy = two_server_farm()
    rep = simulate(system, policy, horizon=20_000.0, warmup=0.0, seed=3)
    lam = system.arrays()["lam"] @ policy.routing
    for s, rate in zip(rep.servers, lam):
        assert abs(s.jobs - rate * 20_000) < 4 * math.sqrt(rate * 20_000 * 3)


def test_idle_farm_power():
    app = ApplicationSpec(1, DistributionSpec(EXPONENTIAL, 1e9, 1.0), DistributionSpec(EXPONENTIAL, 1.0, 1.0))
    srv = ServerSpec(1, 2.0, 9.0, 40.0, 1.0, {1}, 4.0, 0.01)
    rep = simulate(SystemSpec([app], [srv]), StaticPolicy([[1.0]], [5.0]), horizon=100.0, warmup=0.0)
    assert rep.servers[0].jobs == 0
    assert rep.total_power == pytest.approx(40.0 + 8.0, rel=1e-12)


def test_determinism():
    system, policy = two_server_farm()
    a = simulate(system, policy, horizon=2000.0, replications=2, seed=7).to_dict()
    b = simulate(system, policy, horizon=2000.0, replications=2, seed=7).to_dict()
    c = simulate(system, policy, horizon=2000.0, replications=2, seed=8).to_dict()
    assert a == b
    assert a != c


def test_common_random_numbers_across_policies():
    # the arrival streams do not depend on the speeds, so job counts agree exactly
    system, policy = two_server_farm()
    faster = StaticPolicy(policy.routing, policy.speeds * 1.5)
    a = simulate(system, policy, horizon=3000.0, seed=2)
    b = simulate(system, faster, horizon=3000.0, seed=2)
    assert [s.jobs for s in a.servers] == [s.jobs for s in b.servers]
    assert all(sb.mean_response < sa.mean_response for sa, sb in zip(a.servers, b.servers))


def test_speed_series():
    system, policy = two_server_farm()
    rep = simulate(system, policy, horizon=1000.0, warmup=0.0, bucket_width=10.0)
    sp = np.array(rep.series["speed_1"])
    assert len(rep.series["t"]) == 100
    assert np.all((sp >= 1.0 - 1e-12) & (sp <= 3.0 + 1e-12))
    # a fine grid shows both levels
    fine = simulate(system, policy, horizon=50.0, warmup=0.0, bucket_width=1e-3).series["speed_1"]
    assert {round(v, 9) for v in fine} >= {1.0, 3.0}


def test_mm1_ps_mean():
    system, policy = mm1(0.5)
    rep = simulate(system, policy, horizon=100_000.0, warmup=1000.0, replications=5, seed=0)
    s = rep.servers[0]
    assert s.mean_response == pytest.approx(1.0, rel=0.03)


def test_simulate_errors():
    system, policy = two_server_farm()
    with pytest.raises(SimulationError, match="horizon"):
        simulate(system, policy, horizon=-1.0)
    with pytest.raises(SimulationError, match="warmup"):
        simulate(system, policy, horizon=10.0, warmup=10.0)
    with pytest.raises(ConfigError):
        simulate(system, StaticPolicy([[0.5, 0.0], [0.3, 0.7]], policy.speeds), horizon=10.0)
    with pytest.raises(SimulationError, match="instant demand"):
        simulate(system, StaticPolicy(policy.routing, [1.0, 2.0]), horizon=10.0)


# -- tail estimates ------------------------------------------------------------------

def test_empirical_tail():
    s = np.zeros(100_000)
    s[:5] = 10.0
    est = empirical_tail(s, 4.0)
    assert est.probability == 5e-5 and est.n == 100_000
    assert est.lower < 5e-5 < est.upper
    assert empirical_tail(np.ones(10), 4.0).probability == 0.0
    with pytest.raises(SimulationError):
        empirical_tail([], 4.0)


def test_wilson_against_closed_form():
    lo, hi = wilson_interval(0, 100)
    assert lo == pytest.approx(0.0, abs=1e-15)
    assert hi == pytest.approx(1.959963984540054**2 / (100 + 1.959963984540054**2), rel=1e-12)
