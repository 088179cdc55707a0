"""Extremal traces and a vertex-enumeration oracle for the finite-n worst case.

The quantity studied is ``2 * S_n^FCFS - X_n`` (an upper bound on the PS
sojourn of the n-th job) maximised over inter-arrival times in the arrival
uncertainty set and workloads in the workload set, both with nonnegative
entries.  Both sets are polyhedra and the objective is convex and
nonincreasing in the gaps, so the maximum sits at a pair of vertices.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .rq_core import UncertaintyParams, check_membership_arrival, check_membership_workload

log = logging.getLogger(__name__)

MAX_ORACLE_N = 6


class ConstructionError(ValueError):
    pass


def s_ub(lam: float, mu: float, gamma_a: float, gamma_s: float) -> float:
    """Closed-form bound (unit speed): (Ga+Gs)^2 lam / (2(1-rho)) + (2-rho)/lam."""
    rho = lam / mu
    if rho >= 1:
        return math.inf
    return (gamma_a + gamma_s) ** 2 * lam / (2 * (1 - rho)) + (2 - rho) / lam


def per_k_worst(n: int, lam: float, mu: float, gamma_a: float, gamma_s: float) -> np.ndarray:
    """Worst value of the k-th term for k = 1..n."""
    k = np.arange(1, n + 1)
    m = n - k
    return ((2 * m + 1) / mu + gamma_s * (np.sqrt(m + 1) + np.sqrt(m))
            - 2 * m / lam + 2 * gamma_a * np.sqrt(m))


def finite_n_worst(n: int, lam: float, mu: float, gamma_a: float, gamma_s: float) -> float:
    return float(per_k_worst(n, lam, mu, gamma_a, gamma_s).max())


def fcfs_objective(T, X) -> float:
    """2 * S_n^FCFS - X_n via the max-form recursion (T[0] is ignored)."""
    T = np.asarray(T, float)
    X = np.asarray(X, float)
    n = X.size
    best = -math.inf
    for k in range(n):
        best = max(best, X[k:].sum() - T[k + 1:].sum())
    return 2 * best - X[-1]


@dataclass
class ExtremalTrace:
    n: int
    T_star: np.ndarray
    X_star: np.ndarray
    X_star_printed: np.ndarray
    worst_k: int
    params: tuple

    @property
    def value(self) -> float:
        return fcfs_objective(self.T_star, self.X_star)


def printed_workloads(n: int, mu: float, gamma_s: float) -> np.ndarray:
    """Workload maximiser exactly as the appendix formulas read.

    It meets the partial-sum identity for k < n but not k = n, and for n >= 3
    it leaves the workload set; kept for reporting the discrepancy.
    """
    if n == 1:
        return np.array([1 / mu + gamma_s])
    i = np.arange(1, n + 1, dtype=float)
    X = 1 / mu + gamma_s / 2 * (np.sqrt(n - i + 1) - np.sqrt(np.maximum(n - i - 1, 0)))
    X[n - 2] = 1 / mu + gamma_s / 2 * (1 + math.sqrt(2) + math.sqrt(n - 1) - math.sqrt(n))
    X[n - 1] = 1 / mu + gamma_s * (math.sqrt(n) - math.sqrt(n - 1))
    return X


def extremal_workloads(n: int, mu: float, gamma_s: float, k: int) -> np.ndarray:
    """Workloads in the set attaining the k-th partial-sum maximum (1-based k).

    Deviations from the mean are zero before k, telescoping square-root
    increments on k..n-1 (every k'..n-1 constraint tight for k' >= k), and the
    remainder on the last job so the k..n constraint is tight as well.
    """
    m = n - k
    d = np.zeros(n)
    idx = np.arange(k - 1, n - 1)
    r = n - 1 - idx  # n - i for 1-based i
    d[idx] = gamma_s * (np.sqrt(r) - np.sqrt(r - 1))
    d[-1] = gamma_s * (math.sqrt(m + 1) - math.sqrt(m))
    return 1 / mu + d


def extremal_gaps(n: int, lam: float, gamma_a: float, t1: float | None = None) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=float)
    T = 1 / lam - gamma_a * (np.sqrt(n - i + 1) - np.sqrt(n - i))
    T[0] = 1 / lam if t1 is None else t1
    return T


def build_extremal(n: int, lam: float, mu: float, gamma_a: float, gamma_s: float,
                   t1: float | None = None) -> ExtremalTrace:
    if n < 1:
        raise ConstructionError("n must be >= 1")
    if min(lam, mu) <= 0 or min(gamma_a, gamma_s) < 0:
        raise ConstructionError("rates must be positive and variability parameters nonnegative")
    T = extremal_gaps(n, lam, gamma_a, t1)
    if np.any(T[1:] < 0):
        i = int(np.argmax(T[1:] < 0)) + 2
        raise ConstructionError(f"extremal gap T*_{i} = {T[i - 1]:.6g} is negative")
    k = int(np.argmax(per_k_worst(n, lam, mu, gamma_a, gamma_s))) + 1
    X = extremal_workloads(n, mu, gamma_s, k)
    return ExtremalTrace(n, T, X, printed_workloads(n, mu, gamma_s), k, (lam, mu, gamma_a, gamma_s))


# -- vertex enumeration --------------------------------------------------------------

def _vertices(A: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """All vertices of {z : A z <= b} by solving every d-subset of active rows."""
    m, d = A.shape
    combos = np.array(list(itertools.combinations(range(m), d)))
    M = A[combos]
    rhs = b[combos]
    det = np.linalg.det(M)
    ok = np.abs(det) > 1e-12
    M, rhs = M[ok], rhs[ok]
    Z = np.linalg.solve(M, rhs[..., None])[..., 0]
    feas = np.all(Z @ A.T <= b + tol * (1 + np.abs(b)), axis=1)
    Z = Z[feas]
    if Z.size == 0:
        return Z
    return np.unique(np.round(Z, 12), axis=0)


def workload_polytope(n: int, mu: float, gamma_s: float):
    rows, rhs = [], []
    for k in range(n):
        r = np.zeros(n); r[k:] = 1
        rows.append(r); rhs.append((n - k) / mu + gamma_s * math.sqrt(n - k))
    for k in range(n - 1):
        r = np.zeros(n); r[k:n - 1] = 1
        rows.append(r); rhs.append((n - 1 - k) / mu + gamma_s * math.sqrt(n - 1 - k))
    rows.extend(-np.eye(n)); rhs.extend([0.0] * n)
    return np.array(rows), np.array(rhs)


def gap_polyhedron(n: int, lam: float, gamma_a: float):
    """Constraints on (T_2..T_n); the k = 1 row only involves free T_1 and is dropped."""
    d = n - 1
    rows, rhs = [], []
    for k in range(1, n):
        r = np.zeros(d); r[k - 1:] = -1
        rows.append(r); rhs.append(-((n - k) / lam - gamma_a * math.sqrt(n - k)))
    rows.extend(-np.eye(d)); rhs.extend([0.0] * d)
    return np.array(rows), np.array(rhs)


def brute_force_worst_fcfs(n: int, lam: float, mu: float, gamma_a: float, gamma_s: float) -> float:
    """Maximum of 2*S_n^FCFS - X_n over all vertex pairs of the two (nonnegative) sets."""
    if not 1 <= n <= MAX_ORACLE_N:
        raise ValueError(f"oracle limited to 1 <= n <= {MAX_ORACLE_N}")
    Xv = _vertices(*workload_polytope(n, mu, gamma_s))
    if n == 1:
        return float((2 * Xv[:, 0] - Xv[:, 0]).max())
    Tv = _vertices(*gap_polyhedron(n, lam, gamma_a))
    # Lindley recursion over all (X, T) vertex pairs at once
    S = np.broadcast_to(Xv[:, None, 0], (Xv.shape[0], Tv.shape[0])).copy()
    for k in range(1, n):
        S = Xv[:, None, k] + np.maximum(0.0, S - Tv[None, :, k - 1])
    return float((2 * S - Xv[:, None, n - 1]).max())


@dataclass
class VerifyRow:
    name: str
    passed: bool
    detail: str


def draw_params(rng: np.random.Generator):
    lam = rng.uniform(0.5, 4.0)
    rho = rng.uniform(0.1, 0.95)
    mu = lam / rho
    gamma_a = rng.uniform(0.0, 1.5) / lam
    gamma_s = rng.uniform(0.0, 1.5) / mu
    return lam, mu, gamma_a, gamma_s


def verify(draws: int = 200, seed: int = 0, quadratic_sign: float = 1.0) -> list:
    """Run the oracle suite; ``quadratic_sign=-1`` injects the sign-flipped constant term."""
    from .rq_core import bound_values, min_speed, quadratic_coeffs

    rng = np.random.default_rng(seed)
    rows = []
    chain_fail = extremal_fail = member_fail = 0
    rejected = tested = 0
    for _ in range(draws):
        lam, mu, ga, gs = draw_params(rng)
        n = int(rng.integers(1, MAX_ORACLE_N + 1))
        bf = brute_force_worst_fcfs(n, lam, mu, ga, gs)
        an = finite_n_worst(n, lam, mu, ga, gs)
        ub = s_ub(lam, mu, ga, gs)
        if not (bf <= an * (1 + 1e-9) + 1e-12 and an <= ub * (1 + 1e-12)):
            chain_fail += 1
        try:
            tr = build_extremal(n, lam, mu, ga, gs)
        except ConstructionError as exc:
            rejected += 1
            log.info("rejected draw: %s", exc)
            continue
        tested += 1
        if abs(tr.value - an) > 1e-9 * max(1.0, abs(an)) or abs(bf - an) > 1e-7 * max(1.0, abs(an)):
            extremal_fail += 1
        ok_a, _ = check_membership_arrival(tr.T_star, UncertaintyParams(lam, ga, 1.0), tol=1e-9)
        ok_s, _ = check_membership_workload(tr.X_star, UncertaintyParams(mu, gs, 1.0), tol=1e-9)
        member_fail += not (ok_a and ok_s)
    rows.append(VerifyRow("bound chain: oracle <= finite-n <= S_UB", chain_fail == 0, f"{chain_fail} failures / {draws}"))
    rows.append(VerifyRow("extremal traces attain finite-n worst", extremal_fail == 0,
                          f"{extremal_fail} failures / {tested} ({rejected} draws rejected: negative gap)"))
    rows.append(VerifyRow("extremal traces inside uncertainty sets", member_fail == 0, f"{member_fail} failures / {tested}"))

    tr1 = build_extremal(1, 1.0, 2.0, 0.3, 0.4)
    rows.append(VerifyRow("n=1 edge: X*_1 = 1/mu + Gs", bool(abs(tr1.X_star[0] - (0.5 + 0.4)) < 1e-12),
                          f"X*_1 = {tr1.X_star[0]:.12g}"))

    # quadratic / bound consistency, optionally with the constant term's sign flipped
    bad = 0
    for _ in range(200):
        lb = rng.uniform(0.5, 5.0); ga = rng.uniform(0.0, 0.5); gs = rng.uniform(0.0, 0.5)
        om = rng.uniform(0.1, 5.0); delta = rng.uniform(2.0, 20.0)
        a, b, c = quadratic_coeffs(lb, ga, gs, om, delta)
        x, req = min_speed(a, b, quadratic_sign * c, om, 1e-3, 1e6)
        if not np.isfinite(x):
            continue
        val = bound_values(lb, ga, gs, om, x) if x > om else math.inf
        clipped = x > req and val <= delta
        if not (abs(val - delta) <= 1e-6 * delta or clipped):
            bad += 1
    rows.append(VerifyRow("quadratic root reproduces the SLA threshold", bad == 0, f"{bad} mismatches"))
    return rows
