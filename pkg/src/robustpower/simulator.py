"""Discrete-event simulation of a probabilistically routed farm of G/G/1/PS servers.

Servers run at their busy speed while any job is present and drop to the
idle floor ``speed_min`` otherwise.  Routing is static, so each server sees an
independent thinned-and-merged stream; arrivals are generated per application
in time windows and fed to a compiled per-server PS kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine as eng
from .primitives import StaticPolicy, SystemSpec, power


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class TailEstimate:
    probability: float
    lower: float
    upper: float
    n: int


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n <= 0:
        raise SimulationError("no samples")
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def empirical_tail(samples, delta: float) -> TailEstimate:
    """Fraction of sojourn samples >= delta with a 95% Wilson score interval."""
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise SimulationError("empty sample")
    k = int(np.count_nonzero(s >= delta))
    lo, hi = wilson_interval(k, s.size)
    return TailEstimate(k / s.size, lo, hi, int(s.size))


@dataclass
class ServerStats:
    server_id: object
    jobs: int
    violations: int
    violation_prob: float
    violation_upper: float
    violation_se: float
    mean_response: float
    mean_speed: float      # all-time average speed (busy speed while busy, idle floor otherwise)
    busy_speed: float      # average speed over busy time
    utilization: float
    avg_power: float
    avg_power_se: float


@dataclass
class SimReport:
    servers: list
    total_power: float
    total_power_se: float
    replications: int
    horizon: float
    warmup: float
    work_in: float = 0.0
    work_done: float = 0.0
    work_left: float = 0.0
    series: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "total_power": self.total_power,
            "total_power_se": self.total_power_se,
            "replications": self.replications,
            "horizon": self.horizon,
            "warmup": self.warmup,
            "servers": [s.__dict__ for s in self.servers],
        }


def default_horizon(system: SystemSpec, policy: StaticPolicy, jobs_per_server: float = 1e6,
                    warmup_fraction: float = 0.1) -> float:
    lam = system.arrays()["lam"]
    lb = lam @ policy.routing
    lb = lb[lb > 0]
    return jobs_per_server / (lb.min() * (1.0 - warmup_fraction))


class _Stream:
    """Arrivals of one application: renewal gaps, i.i.d. workloads and routing draws."""

    def __init__(self, app, cum_routing, rng, router, block):
        self.app = app
        self.cum = cum_routing
        self.rng = rng
        self.router = router
        self.block = block
        self.t = 0.0
        self.buf_t = np.empty(0)
        self.buf_w = np.empty(0)
        self.buf_s = np.empty(0, dtype=np.int64)

    def _extend(self):
        gaps = self.app.interarrival.sample(self.rng, self.block)
        works = self.app.workload.sample(self.rng, self.block)
        u = self.router.random(self.block)
        t = self.t + np.cumsum(gaps)
        self.t = t[-1]
        srv = np.minimum(np.searchsorted(self.cum, u, side="right"), self.cum.size - 1)
        self.buf_t = np.concatenate([self.buf_t, t])
        self.buf_w = np.concatenate([self.buf_w, works])
        self.buf_s = np.concatenate([self.buf_s, srv])

    def take(self, t_end):
        while self.buf_t.size == 0 or self.buf_t[-1] < t_end:
            self._extend()
        k = int(np.searchsorted(self.buf_t, t_end, side="left"))
        out = self.buf_t[:k], self.buf_w[:k], self.buf_s[:k]
        self.buf_t, self.buf_w, self.buf_s = self.buf_t[k:], self.buf_w[k:], self.buf_s[k:]
        return out


def _replicate(system, policy, horizon, warmup, seq, window, bucket_width, keep_samples):
    J = system.n_servers
    children = seq.spawn(system.n_apps + 1)
    router = np.random.default_rng(children[-1])
    streams = []
    for i, app in enumerate(system.applications):
        cum = np.cumsum(policy.routing[i])
        cum /= cum[-1]
        block = max(64, int(app.arrival_rate * window))
        streams.append(_Stream(app, cum, np.random.default_rng(children[i]), router, block))

    idle_speed = np.array([s.speed_min for s in system.servers])
    fstate = [np.zeros(eng.N_FSTATE) for _ in range(J)]
    stats = [np.zeros(eng.N_STATS) for _ in range(J)]
    heaps = [(np.empty(1024), np.empty(1024), np.empty(1024)) for _ in range(J)]
    nsys = [0] * J
    params = [
        np.array([policy.speeds[j], idle_speed[j], warmup, horizon,
                  float(power(s, policy.speeds[j])), float(power(s, idle_speed[j])), s.sla_threshold])
        for j, s in enumerate(system.servers)
    ]
    nb_buckets = int(math.ceil(horizon / bucket_width)) if bucket_width else 0
    buckets = [np.zeros(nb_buckets) for _ in range(J)]
    samples = [[] for _ in range(J)]
    empty = np.empty(0)

    edges = np.arange(window, horizon, window).tolist() + [horizon]
    for w_end in edges:
        parts = [st.take(w_end) for st in streams]
        t_all = np.concatenate([p[0] for p in parts])
        w_all = np.concatenate([p[1] for p in parts])
        s_all = np.concatenate([p[2] for p in parts])
        order = np.lexsort((t_all, s_all))
        t_all, w_all, s_all = t_all[order], w_all[order], s_all[order]
        bounds = np.searchsorted(s_all, np.arange(J + 1))
        last = w_end >= horizon
        for j in range(J):
            ta = t_all[bounds[j]:bounds[j + 1]]
            wa = w_all[bounds[j]:bounds[j + 1]]
            tags, arr, work = heaps[j]
            need = nsys[j] + ta.size + 1
            if need > tags.size:
                cap = max(need, 2 * tags.size)
                heaps[j] = tuple(np.concatenate([h[: nsys[j]], np.empty(cap - nsys[j])]) for h in heaps[j])
                tags, arr, work = heaps[j]
            buf = np.empty(ta.size + nsys[j]) if keep_samples else empty
            nsys[j], ns = eng.ps_run(fstate[j], tags, arr, work, nsys[j], ta, wa, float(policy.speeds[j]),
                                     stats[j], buf, 0, params[j], buckets[j], float(bucket_width or 0.0), last)
            if keep_samples:
                samples[j].append(buf[:ns].copy())
    left = [float((heaps[j][0][: nsys[j]] - fstate[j][eng.V_CLOCK]).sum()) for j in range(J)]
    return fstate, stats, buckets, [np.concatenate(s) if s else empty for s in samples], left


def simulate(system: SystemSpec, policy: StaticPolicy, horizon: float | None = None,
             warmup: float | None = None, replications: int = 1, seed: int = 0,
             bucket_width: float | None = None, window: float | None = None,
             keep_samples: bool = False) -> SimReport:
    """Run independent replications of the farm under a static policy."""
    policy.validate(system, tol=1e-6)
    lam = system.arrays()["lam"]
    lb = lam @ policy.routing
    if np.any(policy.speeds[lb > 0] <= (system.arrays()["mean_work"] * lam) @ policy.routing[:, lb > 0]):
        raise SimulationError("policy has a server whose busy speed does not exceed its instant demand")
    if horizon is None:
        horizon = default_horizon(system, policy)
    if warmup is None:
        warmup = 0.1 * horizon
    if not horizon > 0:
        raise SimulationError("horizon must be positive")
    if not 0 <= warmup < horizon:
        raise SimulationError("need 0 <= warmup < horizon")
    if replications < 1:
        raise SimulationError("need at least one replication")
    if window is None:
        window = max(horizon / 1000.0, 2e5 / lam.sum())
        window = min(window, horizon)

    J = system.n_servers
    obs = horizon - warmup
    seqs = np.random.SeedSequence(seed).spawn(replications)
    n_jobs = np.zeros((replications, J))
    n_viol = np.zeros((replications, J))
    sum_s = np.zeros((replications, J))
    busy = np.zeros((replications, J))
    energy = np.zeros((replications, J))
    work_in = work_done = work_left = 0.0
    series = None
    all_samples = [[] for _ in range(J)]
    for r, seq in enumerate(seqs):
        fstate, stats, buckets, samples, left = _replicate(
            system, policy, horizon, warmup, seq, window, bucket_width, keep_samples)
        for j in range(J):
            n_jobs[r, j] = stats[j][eng.N_JOBS]
            n_viol[r, j] = stats[j][eng.N_VIOL]
            sum_s[r, j] = stats[j][eng.SUM_S]
            busy[r, j] = fstate[j][eng.BUSY]
            energy[r, j] = fstate[j][eng.ENERGY]
            work_in += fstate[j][eng.WORK_IN]
            work_done += fstate[j][eng.WORK_DONE]
            if keep_samples:
                all_samples[j].append(samples[j])
        work_left += sum(left)
        if bucket_width and r == 0:
            series = _series(system, policy, buckets, bucket_width)

    def se(v):
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")

    servers = []
    for j, s in enumerate(system.servers):
        n, k = int(n_jobs[:, j].sum()), int(n_viol[:, j].sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            per_rep = n_viol[:, j] / n_jobs[:, j]
        upper = wilson_interval(k, n)[1] if n else float("nan")
        util = busy[:, j].sum() / (obs * replications)
        x, g = float(policy.speeds[j]), s.speed_min
        servers.append(ServerStats(
            server_id=s.id,
            jobs=n,
            violations=k,
            violation_prob=k / n if n else float("nan"),
            violation_upper=upper,
            violation_se=se(per_rep),
            mean_response=float(sum_s[:, j].sum() / n) if n else float("nan"),
            mean_speed=util * x + (1 - util) * g,
            busy_speed=x,
            utilization=float(util),
            avg_power=float(energy[:, j].sum() / (obs * replications)),
            avg_power_se=se(energy[:, j] / obs),
        ))
    rep_total = energy.sum(axis=1) / obs
    report = SimReport(servers, float(rep_total.mean()), se(rep_total), replications, float(horizon),
                       float(warmup), work_in, work_done, work_left, series)
    if keep_samples:
        report.samples = [np.concatenate(s) for s in all_samples]
    return report


def _series(system, policy, buckets, width):
    out = {"t": (np.arange(buckets[0].size) * width).tolist()}
    for j, s in enumerate(system.servers):
        frac = np.clip(buckets[j] / width, 0.0, 1.0)
        x, g = policy.speeds[j], s.speed_min
        out[f"speed_{s.id}"] = (frac * x + (1 - frac) * g).tolist()
        out[f"power_{s.id}"] = (frac * power(s, x) + (1 - frac) * power(s, g)).tolist()
    return out


def simulate_coupled_disciplines(interarrivals, workloads, speed: float):
    """Sojourn times of the same trace under PS and under FCFS at a fixed speed.

    ``interarrivals[k]`` is the gap before job k (the first entry is the time
    of the first arrival).  Returns (S_PS, S_FCFS) arrays.
    """
    T = np.asarray(interarrivals, dtype=float)
    X = np.asarray(workloads, dtype=float)
    if T.shape != X.shape:
        raise SimulationError("trace lengths differ")
    A = np.cumsum(T)
    return eng.ps_sojourn(A, X, float(speed)), eng.fcfs_sojourn(T, X, float(speed))


def ps_sojourn_reference(arrivals, workloads, speed: float):
    """Literal event-by-event PS: drain every active job by elapsed*speed/N at each event.

    Slow; used as an independent check of the compiled kernel.  Returns the
    sojourn times and a log of (time, N, arrivals so far - departures so far).
    """
    arrivals = list(map(float, arrivals))
    remaining: dict[int, float] = {}
    total = {k: float(w) for k, w in enumerate(workloads)}
    out = [math.nan] * len(arrivals)
    t, k, departed = 0.0, 0, 0
    log = []
    while k < len(arrivals) or remaining:
        n = len(remaining)
        t_arr = arrivals[k] if k < len(arrivals) else math.inf
        if n:
            j_min = min(remaining, key=remaining.get)
            t_dep = t + remaining[j_min] * n / speed
        else:
            t_dep = math.inf
        t_next = min(t_arr, t_dep)
        if n:
            drained = (t_next - t) * speed / n
            for j in remaining:
                remaining[j] -= drained
        t = t_next
        if t_dep <= t_arr:
            done = [j for j, r in remaining.items() if r <= 1e-12 * total[j] or j == j_min]
            for j in done:
                del remaining[j]
                out[j] = t - arrivals[j]
                departed += 1
        else:
            remaining[k] = total[k]
            k += 1
        log.append((t, len(remaining), k - departed))
    return np.array(out), log
