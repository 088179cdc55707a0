"""Static routing / speed planning by speed elimination and multi-start projected descent.

For a fixed routing matrix every server's cheapest SLA-feasible busy speed is
the smallest root-admissible speed of its quadratic (power is increasing in
speed), so the planning problem reduces to a search over one probability
simplex per application.  That reduced problem is nonconvex; it is attacked
with projected gradient descent from many random starts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .primitives import StaticPolicy, SystemSpec
from .rq_core import (
    P_ZERO,
    STABILITY_MARGIN,
    aggregate_flows,
    bound_values,
    gamma_from_epsilon,
    min_speed,
    quadratic_coeffs,
)

log = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL_LOCAL = "Optimal-local"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class SolveOptions:
    max_iterations: int = 20000
    restarts: int = 32
    tolerance: float = 1e-9
    seed: int = 0
    margin: float = STABILITY_MARGIN

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class ServerDiagnostics:
    server_id: object
    lambda_bar: float
    gamma_a_bar: float
    gamma_s_bar: float
    omega_bar: float
    speed: float
    bound: float
    floor_limit: float  # 2 * gamma_a_bar, the bound's infimum over all speeds


@dataclass
class SolveResult:
    policy: StaticPolicy | None
    objective: float
    status: Status
    per_server: list = field(default_factory=list)
    restarts_feasible: int = 0

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "objective": self.objective,
            "policy": None if self.policy is None else self.policy.to_dict(),
            "per_server": [d.__dict__ for d in self.per_server],
        }


class FlowProblem:
    """Flattened view of the allowed (application, server) routes of a system."""

    def __init__(self, system: SystemSpec, gamma=None):
        self.system = system
        self.arr = system.arrays()
        mask = system.mask()
        self.app_of, self.srv_of = np.nonzero(mask)
        self.n_flows = self.app_of.size
        self.shape = mask.shape
        if gamma is None:
            gamma = np.array([gamma_from_epsilon(e) for e in self.arr["epsilon"]])
        self.gamma = np.broadcast_to(np.asarray(gamma, float), (system.n_servers,)).copy()
        # position of each flow within its server; flows sharing a colour live on different servers
        self.color = np.zeros(self.n_flows, dtype=int)
        seen: dict = {}
        for f, j in enumerate(self.srv_of):
            self.color[f] = seen.get(j, 0)
            seen[j] = self.color[f] + 1
        self.n_colors = int(self.color.max()) + 1
        # padded app -> flow table for simplex projection
        deg = np.bincount(self.app_of, minlength=self.shape[0])
        self.pad = np.full((self.shape[0], deg.max()), -1)
        fill = np.zeros(self.shape[0], dtype=int)
        for f, i in enumerate(self.app_of):
            self.pad[i, fill[i]] = f
            fill[i] += 1
        self.deg = deg

    def matrix(self, p: np.ndarray) -> np.ndarray:
        P = np.zeros(self.shape)
        P[self.app_of, self.srv_of] = p
        return P

    def flows(self, P: np.ndarray) -> np.ndarray:
        return np.asarray(P, float)[self.app_of, self.srv_of]

    def aggregates(self, p: np.ndarray) -> dict:
        a = self.arr
        return aggregate_flows(p, self.app_of, self.srv_of, self.shape[1],
                               a["lam"], a["scov_a"], a["mean_work"], a["sigma_s"], self.gamma)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the product of per-application simplices."""
        V = np.where(self.pad >= 0, v[np.maximum(self.pad, 0)], -np.inf)
        U = -np.sort(-V, axis=1)
        valid = np.isfinite(U)
        css = np.cumsum(np.where(valid, U, 0.0), axis=1)
        k = np.arange(1, U.shape[1] + 1)
        cond = valid & (U - (css - 1.0) / k > 0)
        r = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
        theta = (css[np.arange(len(r)), r] - 1.0) / (r + 1)
        out = np.maximum(v - theta[self.app_of], 0.0)
        return out

    def random_start(self, rng: np.random.Generator) -> np.ndarray:
        g = rng.gamma(1.0, size=self.n_flows)
        sums = np.bincount(self.app_of, g, self.shape[0])
        return g / sums[self.app_of]

    def uniform_start(self) -> np.ndarray:
        return 1.0 / self.deg[self.app_of]

    def column_grad(self, fn, p: np.ndarray, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
        """Per-flow derivative of fn's entry for the flow's own server.

        ``fn(p)`` returns one value per server and each entry depends only on
        that server's column, so all flows of one colour are perturbed at once.
        """
        base = fn(p)
        grad = np.zeros(self.n_flows)
        for k in range(self.n_colors):
            sel = self.color == k
            up = p.copy()
            dn = p.copy()
            up[sel] = np.minimum(p[sel] + h, 1.0)
            dn[sel] = np.maximum(p[sel] - h, 0.0)
            # stay on one side of the structural-zero threshold
            dn[sel & (p <= h)] = p[sel & (p <= h)]
            f_up, f_dn = fn(up), fn(dn)
            j = self.srv_of[sel]
            spread = up[sel] - dn[sel]
            with np.errstate(invalid="ignore"):
                grad[sel] = (f_up[j] - f_dn[j]) / spread
        return base, grad


# -- power model after speed elimination -------------------------------------------

def eliminate_speeds(prob: FlowProblem, p: np.ndarray, margin: float = STABILITY_MARGIN):
    """Minimal feasible busy speed per server (NaN where none) and the aggregate dict."""
    agg = prob.aggregates(p)
    a, b, c = _coeffs(agg, prob.arr["delta"], prob.gamma)
    x, _ = min_speed(a, b, c, agg["omega_bar"], prob.arr["speed_min"], prob.arr["speed_max"], margin)
    return x, agg, (a, b, c)


def _coeffs(agg, delta, gamma):
    lb = agg["lambda_bar"]
    starved = lb <= 0
    safe = lambda v: np.where(starved, 0.0, v)
    with np.errstate(invalid="ignore"):
        a, b, c = quadratic_coeffs(lb, safe(agg["gamma_a_bar"]), safe(agg["gamma_s_bar"]), agg["omega_bar"], delta)
    # an empty server has limit coefficients (4, 0, 0): never feasible
    a = np.where(starved, 4.0, a)
    return a, np.where(starved, 0.0, b), np.where(starved, 0.0, c)


def _violation(a, b, c, omega, lo, hi, margin):
    """Scale-free infeasibility: min over the speed box of q(x)/x^2 (0 at the feasibility boundary)."""
    floor = np.maximum(lo, omega * (1 + margin))
    u_hi, u_lo = 1.0 / floor, 1.0 / hi
    g = lambda u: a + b * u + c * u * u
    with np.errstate(divide="ignore", invalid="ignore"):
        u_star = np.clip(np.where(c > 0, -b / (2 * c), u_lo), u_lo, np.maximum(u_lo, u_hi))
    v = np.fmin(np.fmin(g(u_lo), g(np.minimum(u_hi, np.inf))), g(u_star))
    v = np.maximum(v, 0.0)
    unstable = floor > hi
    v = np.where(unstable, np.abs(g(u_lo)) + (floor - hi) / hi + 1.0, v)
    return v + 1e-12


def server_costs(prob: FlowProblem, p: np.ndarray, margin: float = STABILITY_MARGIN) -> np.ndarray:
    """Power per server at its eliminated speed, or a penalised value if infeasible."""
    arr = prob.arr
    x, agg, (a, b, c) = eliminate_speeds(prob, p, margin)
    cap = arr["power_base"] + arr["power_coeff"] * arr["speed_max"] ** arr["power_exponent"]
    feas = np.isfinite(x)
    cost = arr["power_base"] + arr["power_coeff"] * np.where(feas, x, arr["speed_max"]) ** arr["power_exponent"]
    if not feas.all():
        viol = _violation(a, b, c, agg["omega_bar"], arr["speed_min"], arr["speed_max"], margin)
        cost = np.where(feas, cost, cap + cap.max() * viol)
    return cost


# -- projected descent -------------------------------------------------------------

def _descend(prob: FlowProblem, p: np.ndarray, value_and_grad, max_iter: int, tol: float):
    """Projected gradient with Armijo backtracking.  Returns (p, value, converged)."""
    f, g = value_and_grad(p)
    step = 1.0 / max(np.abs(g).max(), 1e-300)
    stall = 0
    for _ in range(max_iter):
        accepted = False
        for _ in range(60):
            q = prob.project(p - step * g)
            d = q - p
            fq = value_and_grad(q, value_only=True)
            if np.isfinite(fq) and fq <= f + g @ d + (d @ d) / (2 * step):
                accepted = True
                break
            step *= 0.5
        if not accepted or not np.any(d):
            return p, f, True
        rel = (f - fq) / max(abs(f), 1e-300)
        p = q
        f, g = value_and_grad(p)
        step *= 2.0
        stall = stall + 1 if rel < tol else 0
        if stall >= 3:
            return p, f, True
    return p, f, False


def _power_objective(prob: FlowProblem, margin: float):
    def fn(p, value_only=False):
        if value_only:
            return float(server_costs(prob, p, margin).sum())
        costs, grad = prob.column_grad(lambda v: server_costs(prob, v, margin), p)
        return float(costs.sum()), grad
    return fn


def diagnostics(prob: FlowProblem, p: np.ndarray, x: np.ndarray, agg: dict) -> list:
    out = []
    for j, s in enumerate(prob.system.servers):
        lb, ga, gs, om = (agg[k][j] for k in ("lambda_bar", "gamma_a_bar", "gamma_s_bar", "omega_bar"))
        with np.errstate(all="ignore"):
            bnd = float(bound_values(lb, ga, gs, om, x[j])) if np.isfinite(x[j]) and lb > 0 else math.inf
        out.append(ServerDiagnostics(s.id, float(lb), float(ga), float(gs), float(om), float(x[j]), bnd, float(2 * ga)))
    return out


def _better(cand, best):
    if best is None:
        return True
    if cand[0] < best[0] - 1e-12 * abs(best[0]):
        return True
    if abs(cand[0] - best[0]) <= 1e-12 * abs(best[0]):
        return tuple(cand[1]) < tuple(best[1])
    return False


def solve_m2(system: SystemSpec, options: SolveOptions | None = None) -> SolveResult:
    """Minimise total power over routing matrices with speeds eliminated analytically."""
    options = options or SolveOptions()
    prob = FlowProblem(system)
    objective = _power_objective(prob, options.margin)
    rng = np.random.default_rng(options.seed)
    starts = [prob.uniform_start()] + [prob.random_start(rng) for _ in range(options.restarts - 1)]
    best = None
    n_feasible = 0
    for k, p0 in enumerate(starts):
        p, _, converged = _descend(prob, p0, objective, options.max_iterations, options.tolerance)
        p = np.where(p > P_ZERO, p, 0.0)
        p = p / np.bincount(prob.app_of, p, prob.shape[0])[prob.app_of]
        x, _, _ = eliminate_speeds(prob, p, options.margin)
        if not np.all(np.isfinite(x)):
            log.debug("restart %d ended infeasible", k)
            continue
        n_feasible += 1
        arr = prob.arr
        total = float((arr["power_base"] + arr["power_coeff"] * x ** arr["power_exponent"]).sum())
        cand = (total, np.round(p, 12), p, x, converged)
        if _better(cand, best):
            best = cand
    if best is None:
        # report diagnostics of the uniform routing so callers can see which servers block
        p = prob.uniform_start()
        x, agg, _ = eliminate_speeds(prob, p, options.margin)
        return SolveResult(None, math.inf, Status.INFEASIBLE, diagnostics(prob, p, x, agg), 0)
    total, _, p, x, converged = best
    x, agg, _ = eliminate_speeds(prob, p, options.margin)
    policy = StaticPolicy(prob.matrix(p), x)
    status = Status.OPTIMAL_LOCAL if converged else Status.ITERATION_LIMIT
    return SolveResult(policy, total, status, diagnostics(prob, p, x, agg), n_feasible)


# -- min-max feasibility ---------------------------------------------------------------

def _minmax_values(prob: FlowProblem, p: np.ndarray) -> np.ndarray:
    agg = prob.aggregates(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = 2.0 * agg["gamma_a_bar"]
    return np.where(agg["lambda_bar"] > 0, v, np.inf)


def feasibility_minmax(system: SystemSpec, epsilon: float, restarts: int = 16, seed: int = 0,
                       max_iterations: int = 400):
    """min over routings of max over servers of 2*gamma_a_bar.

    Returns (value, routing matrix).  Uses a log-sum-exp smoothing of the max
    with a decreasing temperature; the value reported is the true max.
    """
    prob = FlowProblem(system, gamma=gamma_from_epsilon(epsilon))
    rng = np.random.default_rng(seed)
    starts = [prob.uniform_start()] + [prob.random_start(rng) for _ in range(restarts - 1)]
    best_v, best_p = math.inf, None
    for p in starts:
        scale = float(_minmax_values(prob, p)[np.isfinite(_minmax_values(prob, p))].max())
        for tau in scale * np.array([3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4]):
            def fn(q, value_only=False, tau=tau):
                v, dv = (None, None)
                if value_only:
                    v = _minmax_values(prob, q)
                    return _softmax(v, tau)[0]
                v, dv = prob.column_grad(lambda z: _minmax_values(prob, z), q)
                s, w = _softmax(v, tau)
                return s, w[prob.srv_of] * np.nan_to_num(dv)
            p, _, _ = _descend(prob, p, fn, max_iterations, 1e-12)
        v = float(_minmax_values(prob, p).max())
        if v < best_v - 1e-12 or (abs(v - best_v) <= 1e-12 and tuple(np.round(p, 12)) < tuple(np.round(best_p, 12))):
            best_v, best_p = v, p
    return best_v, prob.matrix(best_p)


def _softmax(v: np.ndarray, tau: float):
    if not np.all(np.isfinite(v)):
        return math.inf, np.zeros_like(v)
    m = v.max()
    e = np.exp((v - m) / tau)
    s = e.sum()
    return float(m + tau * math.log(s)), e / s


# -- policy checking ---------------------------------------------------------------------

@dataclass
class ServerCheck:
    server_id: object
    lambda_bar: float
    gamma_a_bar: float
    gamma_s_bar: float
    omega_bar: float
    speed: float
    bound: float
    residual: float  # a*x^2 + b*x + c, <= 0 when the SLA condition holds
    stable: bool
    in_box: bool
    power: float
    ok: bool


@dataclass
class PolicyReport:
    servers: list
    routing_ok: bool
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.routing_ok and all(s.ok for s in self.servers)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "routing_ok": self.routing_ok, "message": self.message,
                "servers": [s.__dict__ for s in self.servers]}


def check_policy(system: SystemSpec, policy: StaticPolicy, tol: float = 1e-6) -> PolicyReport:
    """Evaluate every SLA/stability/box constraint of a policy, server by server."""
    shape = (system.n_apps, system.n_servers)
    if policy.routing.shape != shape or policy.speeds.shape != (system.n_servers,):
        raise ValueError(f"policy dimensions {policy.routing.shape}/{policy.speeds.shape} do not match system {shape}")
    routing_ok, message = True, ""
    try:
        policy.validate(system, tol=tol)
    except ValueError as exc:
        routing_ok, message = False, str(exc)
    prob = FlowProblem(system)
    p = prob.flows(policy.routing)
    agg = prob.aggregates(p)
    a, b, c = _coeffs(agg, prob.arr["delta"], prob.gamma)
    arr = prob.arr
    out = []
    for j, s in enumerate(system.servers):
        x = float(policy.speeds[j])
        lb, ga, gs, om = (float(agg[k][j]) for k in ("lambda_bar", "gamma_a_bar", "gamma_s_bar", "omega_bar"))
        stable = lb > 0 and x > om
        bnd = float(bound_values(lb, ga, gs, om, x)) if stable else math.inf
        resid = float((a[j] * x + b[j]) * x + c[j])
        in_box = arr["speed_min"][j] * (1 - 1e-12) <= x <= arr["speed_max"][j] * (1 + 1e-12)
        pw = float(arr["power_base"][j] + arr["power_coeff"][j] * x ** arr["power_exponent"][j])
        ok = stable and in_box and bnd <= s.sla_threshold * (1 + tol)
        out.append(ServerCheck(s.id, lb, ga, gs, om, x, bnd, resid, stable, in_box, pw, ok))
    return PolicyReport(out, routing_ok, message)
