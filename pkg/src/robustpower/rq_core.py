"""Closed-form robust-queueing math for a probabilistically routed PS server farm.

Everything here is a pure function of value types.  Scalar entry points
(``thin``, ``superpose``, ``response_time_bound`` ...) are thin wrappers over
vectorised kernels (``aggregate``, ``quadratic_coeffs``, ``min_speed``) that
the optimizer evaluates for all servers at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .primitives import ApplicationSpec, ServerSpec

TAIL_COEFFICIENT = 2.0
P_ZERO = 1e-9
STABILITY_MARGIN = 1e-6


class DomainError(ValueError):
    pass


class StabilityError(ValueError):
    pass


class DegenerateAggregateError(ValueError):
    pass


class InfeasibleSpeedError(ValueError):
    def __init__(self, msg, required_speed=float("nan")):
        super().__init__(msg)
        self.required_speed = required_speed


# -- normal quantile ---------------------------------------------------------

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _lower_tail_ppf(q: float) -> float:
    # Acklam's region split; the rational form is accurate to about 1e-9 before refinement
    if q < _P_LOW:
        r = math.sqrt(-2.0 * math.log(q))
        return (((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / (
            (((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0)
    u = q - 0.5
    r = u * u
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * u / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def _refine(z: float, q: float) -> float:
    # one Newton step on the lower tail, where erfc keeps full relative precision
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return z - (norm_cdf(z) - q) / pdf


def norm_ppf(q: float) -> float:
    """Inverse standard normal CDF: Acklam's rational approximation plus one Newton step."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    if q > 0.5:
        return norm_isf(1.0 - q)
    return _refine(_lower_tail_ppf(q), q)


def norm_isf(tail: float) -> float:
    """z with P(Z > z) = tail, computed from the tail probability without cancellation."""
    if not 0.0 < tail < 1.0:
        raise DomainError(f"tail probability must lie in (0, 1), got {tail}")
    if tail > 0.5:
        return -norm_isf(1.0 - tail)
    return -_refine(_lower_tail_ppf(tail), tail)


def gamma_from_epsilon(epsilon: float) -> float:
    """Service-level constant: both uncertainty sets get probability sqrt(1 - eps)."""
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    # 1 - sqrt(1 - eps), written to avoid cancellation for small eps
    return norm_isf(epsilon / (1.0 + math.sqrt(1.0 - epsilon)))


# -- uncertainty sets --------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyParams:
    rate: float
    sigma: float
    gamma: float = float("nan")
    tail_coefficient: float = TAIL_COEFFICIENT

    @property
    def variability(self) -> float:
        return self.gamma * self.sigma

    def bind(self, gamma: float) -> "UncertaintyParams":
        return UncertaintyParams(self.rate, self.sigma, gamma, self.tail_coefficient)


def arrival_slacks(T: Sequence[float], rate: float, variability: float) -> np.ndarray:
    """Slack of every suffix constraint of the inter-arrival set, indexed by k = 1..n."""
    T = np.asarray(T, dtype=float)
    n = T.size
    m = np.arange(n, 0, -1)  # n - k + 1
    suffix = np.cumsum(T[::-1])[::-1]
    return suffix - m / rate + variability * np.sqrt(m)


def workload_slacks(X: Sequence[float], rate: float, variability: float) -> tuple[np.ndarray, np.ndarray]:
    """Slacks of the two suffix families of the workload set.

    First array: sums k..n for k = 1..n.  Second: sums k..n-1 for k = 1..n-1.
    """
    X = np.asarray(X, dtype=float)
    n = X.size
    m = np.arange(n, 0, -1)
    full = np.cumsum(X[::-1])[::-1]
    s_full = variability * np.sqrt(m) - (full - m / rate)
    if n == 1:
        return s_full, np.empty(0)
    part = full[:-1] - X[-1]
    m2 = m[:-1] - 1
    s_part = variability * np.sqrt(m2) - (part - m2 / rate)
    return s_full, s_part


def check_membership_arrival(T, params: UncertaintyParams, tol: float = 1e-12):
    """Return (inside, first violated k or None); k is 1-based."""
    if len(T) == 0:
        raise DomainError("empty inter-arrival sequence")
    s = arrival_slacks(T, params.rate, params.variability)
    bad = np.flatnonzero(s < -tol)
    return (True, None) if bad.size == 0 else (False, int(bad[0]) + 1)


def check_membership_workload(X, params: UncertaintyParams, tol: float = 1e-12):
    """Return (inside, first violated (family, k) or None).

    family 'n' is the k..n constraint, family 'n-1' the k..n-1 constraint.
    """
    if len(X) == 0:
        raise DomainError("empty workload sequence")
    s_full, s_part = workload_slacks(X, params.rate, params.variability)
    bad = np.flatnonzero(s_full < -tol)
    if bad.size:
        return False, ("n", int(bad[0]) + 1)
    bad = np.flatnonzero(s_part < -tol)
    if bad.size:
        return False, ("n-1", int(bad[0]) + 1)
    return True, None


# -- thinning / superposition --------------------------------------------------

def thin(app: ApplicationSpec, p: float) -> UncertaintyParams:
    """Arrival-side parameters of the flow routed from ``app`` with probability p."""
    if not 0.0 < p <= 1.0:
        raise DomainError(f"routing probability must lie in (0, 1], got {p}")
    return UncertaintyParams(app.arrival_rate * p, app.sigma_a / math.sqrt(p * (2.0 - p)))


@dataclass(frozen=True)
class ServerAggregate:
    lambda_bar: float
    gamma_a_bar: float
    mu_bar_inv: float
    gamma_s_bar: float
    sigma_s_bar: float
    omega_bar: float
    gamma_level: float


def aggregate(P: np.ndarray, lam, scov_a, mean_work, sigma_s, gamma) -> dict:
    """Superposed parameters for every server column of an (apps x servers) routing matrix.

    ``gamma`` is a scalar or one value per server.  Entries below P_ZERO are
    structural zeros.  Servers with no traffic get lambda_bar = 0 and NaN
    elsewhere.
    """
    P = np.asarray(P, dtype=float)
    app_of, srv_of = np.nonzero(P > P_ZERO)
    return aggregate_flows(P[app_of, srv_of], app_of, srv_of, P.shape[1], lam, scov_a, mean_work, sigma_s, gamma)


def aggregate_flows(p, app_of, srv_of, n_servers, lam, scov_a, mean_work, sigma_s, gamma) -> dict:
    """Sparse form of ``aggregate``: flow f routes app_of[f] to srv_of[f] with probability p[f]."""
    p = np.where(p > P_ZERO, p, 0.0)
    lam = np.asarray(lam, float)[app_of]
    mw = np.asarray(mean_work, float)[app_of]
    w = lam * p
    lb = np.bincount(srv_of, w, n_servers)
    mix = np.bincount(srv_of, p / (2.0 - p) * np.asarray(scov_a, float)[app_of], n_servers)
    om = np.bincount(srv_of, w * mw, n_servers)
    with np.errstate(divide="ignore", invalid="ignore"):
        ga = gamma * np.sqrt(mix) / lb
        mbar = om / lb
        dev = np.asarray(sigma_s, float)[app_of] ** 2 + (mbar[srv_of] - mw) ** 2
        s2 = np.bincount(srv_of, np.where(w > 0, w * dev, 0.0), n_servers) / lb
        ss = np.sqrt(s2)
    return {"lambda_bar": lb, "gamma_a_bar": ga, "mu_bar_inv": mbar,
            "gamma_s_bar": gamma * ss, "sigma_s_bar": ss, "omega_bar": om}


def superpose(flows: Sequence[tuple[ApplicationSpec, float]], gamma_level: float) -> ServerAggregate:
    """Merge the thinned flows entering one server."""
    flows = [(a, p) for a, p in flows if p > P_ZERO]
    if not flows:
        raise DegenerateAggregateError("server receives no traffic (all routing probabilities are zero)")
    P = np.array([[p] for _, p in flows])
    apps = [a for a, _ in flows]
    agg = aggregate(
        P,
        [a.arrival_rate for a in apps],
        [a.scov_a for a in apps],
        [a.mean_work for a in apps],
        [a.sigma_s for a in apps],
        gamma_level,
    )
    return ServerAggregate(**{k: float(v[0]) for k, v in agg.items()}, gamma_level=float(gamma_level))


# -- bound and quadratic ---------------------------------------------------------

def response_time_bound(agg: ServerAggregate, speed: float) -> float:
    """Upper bound on the worst-case PS sojourn time at busy speed ``speed``."""
    if speed <= agg.omega_bar:
        raise StabilityError(f"speed {speed} does not exceed instant demand {agg.omega_bar}")
    return float(bound_values(agg.lambda_bar, agg.gamma_a_bar, agg.gamma_s_bar, agg.omega_bar, speed))


def bound_values(lb, ga, gs, om, x):
    rho = om / x
    return lb * (ga + gs / x) ** 2 / (2.0 * (1.0 - rho)) + (2.0 - rho) / lb


def feasibility_floor(agg: ServerAggregate, speed: float) -> float:
    """AM-GM lower bound of the response-time bound; tends to 2*gamma_a_bar as speed grows."""
    if speed <= 0:
        raise DomainError("speed must be positive")
    return 2.0 * (agg.gamma_a_bar + agg.gamma_s_bar / speed) + agg.omega_bar / (agg.lambda_bar * speed)


@dataclass(frozen=True)
class SlaQuadratic:
    a: float
    b: float
    c: float
    stability_floor: float

    def __call__(self, x):
        return (self.a * x + self.b) * x + self.c


def quadratic_coeffs(lb, ga, gs, om, delta):
    a = lb**2 * ga**2 + 4.0 - 2.0 * lb * delta
    b = 2.0 * (lb**2 * ga * gs + om * lb * delta - 3.0 * om)
    c = lb**2 * gs**2 + 2.0 * om**2
    return a, b, c


def sla_quadratic(agg: ServerAggregate, delta: float) -> SlaQuadratic:
    """SLA sufficient condition as a*x^2 + b*x + c <= 0 in the busy speed x."""
    a, b, c = quadratic_coeffs(agg.lambda_bar, agg.gamma_a_bar, agg.gamma_s_bar, agg.omega_bar, delta)
    return SlaQuadratic(float(a), float(b), float(c), float(agg.omega_bar))


def min_speed(a, b, c, omega, lo, hi, margin=STABILITY_MARGIN):
    """Vectorised smallest feasible speed; NaN where infeasible.

    Also returns the unclipped required speed (the root the box was tested
    against, or +inf when no x > omega satisfies the inequality).
    """
    a, b, c, omega, lo, hi = np.broadcast_arrays(*(np.asarray(v, float) for v in (a, b, c, omega, lo, hi)))
    floor = np.maximum(lo, omega * (1.0 + margin))
    req = np.full(a.shape, np.inf)
    upper = np.full(a.shape, np.inf)
    disc = b * b - 4.0 * a * c
    sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
    with np.errstate(divide="ignore", invalid="ignore"):
        # stable root pair: q = -(b + sign(b) sqrt(disc))/2, roots q/a and c/q
        q = -0.5 * (b + np.copysign(sq, b))
        r1, r2 = q / a, c / q
        small, big = np.fmin(r1, r2), np.fmax(r1, r2)
        neg = a < 0
        # concave: feasible for x >= larger root
        req = np.where(neg & (disc >= 0), big, req)
        # convex: feasible on [small, big] when that lies above omega
        pos = (a > 0) & (disc >= 0) & (big > omega)
        req = np.where(pos, np.maximum(small, omega), req)
        upper = np.where(pos, big, upper)
        lin = (a == 0) & (b < 0)
        req = np.where(lin, -c / b, req)
    req = np.where(np.isnan(req), np.inf, req)
    x = np.maximum(req, floor)
    ok = np.isfinite(req) & (x <= hi) & (x <= upper)
    return np.where(ok, x, np.nan), req


def min_feasible_speed(q: SlaQuadratic, server: ServerSpec, margin: float = STABILITY_MARGIN) -> float:
    """Smallest speed in the server's box satisfying the SLA quadratic.

    Raises InfeasibleSpeedError (carrying the required speed) otherwise.
    """
    if q.a < 0:
        assert q.b * q.b - 4 * q.a * q.c >= 0, "concave quadratic with c >= 0 must have real roots"
    x, req = min_speed(q.a, q.b, q.c, q.stability_floor, server.speed_min, server.speed_max, margin)
    x, req = float(x), float(req)
    if math.isnan(x):
        raise InfeasibleSpeedError(
            f"server {server.id}: no speed in [{server.speed_min}, {server.speed_max}] meets the SLA "
            f"(required {req:.6g})",
            req,
        )
    return x
