"""Domain types for applications, servers and static policies, plus config I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

LOGNORMAL = "Lognormal"
EXPONENTIAL = "Exponential"
FAMILIES = (LOGNORMAL, EXPONENTIAL)

ROW_SUM_TOL = 1e-9


class ConfigError(ValueError):
    """Raised when a config or policy document is malformed or violates an invariant."""


@dataclass(frozen=True)
class DistributionSpec:
    family: str
    mean: float
    scov: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown distribution family {self.family!r}")
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise ConfigError(f"distribution mean must be positive, got {self.mean}")
        if not (self.scov > 0 and math.isfinite(self.scov)):
            raise ConfigError(f"distribution scov must be positive, got {self.scov}")
        if self.family == EXPONENTIAL and self.scov != 1.0:
            raise ConfigError(f"Exponential distribution requires scov=1, got {self.scov}")

    @property
    def std(self) -> float:
        return self.mean * math.sqrt(self.scov)

    @property
    def variance(self) -> float:
        return self.mean**2 * self.scov

    def lognormal_params(self) -> tuple[float, float]:
        """Return (log-mean, log-variance) of the underlying normal."""
        s2 = math.log1p(self.scov)
        return math.log(self.mean) - 0.5 * s2, s2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == EXPONENTIAL:
            return rng.exponential(self.mean, size)
        m, s2 = self.lognormal_params()
        return rng.lognormal(m, math.sqrt(s2), size)

    def to_dict(self) -> dict:
        return {"family": self.family, "mean": self.mean, "scov": self.scov}


@dataclass(frozen=True)
class ApplicationSpec:
    id: int
    interarrival: DistributionSpec
    workload: DistributionSpec

    @property
    def arrival_rate(self) -> float:
        return 1.0 / self.interarrival.mean

    @property
    def sigma_a(self) -> float:
        return self.interarrival.std

    @property
    def scov_a(self) -> float:
        return self.interarrival.scov

    @property
    def mean_work(self) -> float:
        return self.workload.mean

    @property
    def service_rate(self) -> float:
        return 1.0 / self.workload.mean

    @property
    def sigma_s(self) -> float:
        return self.workload.std

    @property
    def omega(self) -> float:
        return instant_demand(self)


@dataclass(frozen=True)
class ServerSpec:
    id: int
    speed_min: float
    speed_max: float
    power_base: float
    power_coeff: float
    apps: frozenset
    sla_threshold: float
    sla_epsilon: float
    power_exponent: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "apps", frozenset(self.apps))
        for name in ("speed_min", "speed_max", "power_base", "power_coeff", "sla_threshold",
                     "sla_epsilon", "power_exponent"):
            object.__setattr__(self, name, float(getattr(self, name)))
        where = f"server {self.id}"
        if not 0 < self.speed_min < self.speed_max:
            raise ConfigError(f"{where}: need 0 < speed_min < speed_max")
        if self.power_base < 0:
            raise ConfigError(f"{where}: power_base must be >= 0")
        if self.power_coeff <= 0:
            raise ConfigError(f"{where}: power_coeff must be > 0")
        if not self.apps:
            raise ConfigError(f"{where}: app set must be non-empty")
        if not 0 < self.sla_epsilon < 1:
            raise ConfigError(f"{where}: sla_epsilon must lie in (0, 1)")
        if self.sla_threshold <= 0:
            raise ConfigError(f"{where}: sla_threshold must be > 0")


def instant_demand(app: ApplicationSpec) -> float:
    """Offered work per unit time, lambda/mu."""
    return app.workload.mean / app.interarrival.mean


def power(server: ServerSpec, speed):
    return server.power_base + server.power_coeff * np.power(speed, server.power_exponent)


@dataclass
class SystemSpec:
    applications: list
    servers: list
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        ids = [a.id for a in self.applications]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate application ids")
        sids = [s.id for s in self.servers]
        if len(set(sids)) != len(sids):
            raise ConfigError("duplicate server ids")
        self._index = {a: k for k, a in enumerate(ids)}
        for s in self.servers:
            unknown = set(s.apps) - set(ids)
            if unknown:
                raise ConfigError(f"server {s.id}: unknown applications {sorted(unknown)}")
        for a in self.applications:
            if not any(a.id in s.apps for s in self.servers):
                raise ConfigError(f"application {a.id} is not hosted by any server")

    @property
    def n_apps(self) -> int:
        return len(self.applications)

    @property
    def n_servers(self) -> int:
        return len(self.servers)

    def app_index(self, app_id) -> int:
        return self._index[app_id]

    def servers_for(self, app_id) -> list[int]:
        """Positions of the servers hosting ``app_id``."""
        return [j for j, s in enumerate(self.servers) if app_id in s.apps]

    def mask(self) -> np.ndarray:
        """Boolean (apps x servers) matrix of allowed routes."""
        m = np.zeros((self.n_apps, self.n_servers), dtype=bool)
        for j, s in enumerate(self.servers):
            for a in s.apps:
                m[self._index[a], j] = True
        return m

    def arrays(self) -> dict:
        apps, srv = self.applications, self.servers
        return {
            "lam": np.array([a.arrival_rate for a in apps]),
            "scov_a": np.array([a.scov_a for a in apps]),
            "sigma_a": np.array([a.sigma_a for a in apps]),
            "mean_work": np.array([a.mean_work for a in apps]),
            "sigma_s": np.array([a.sigma_s for a in apps]),
            "omega": np.array([a.omega for a in apps]),
            "speed_min": np.array([s.speed_min for s in srv]),
            "speed_max": np.array([s.speed_max for s in srv]),
            "power_base": np.array([s.power_base for s in srv]),
            "power_coeff": np.array([s.power_coeff for s in srv]),
            "power_exponent": np.array([s.power_exponent for s in srv]),
            "delta": np.array([s.sla_threshold for s in srv]),
            "epsilon": np.array([s.sla_epsilon for s in srv]),
        }

    def with_sla(self, delta=None, epsilon=None) -> "SystemSpec":
        """Copy with a uniform SLA pair applied to every server."""
        servers = []
        for s in self.servers:
            kw = s.__dict__.copy()
            if delta is not None:
                kw["sla_threshold"] = float(delta)
            if epsilon is not None:
                kw["sla_epsilon"] = float(epsilon)
            servers.append(ServerSpec(**kw))
        return SystemSpec(list(self.applications), servers)

    def to_dict(self) -> dict:
        return {
            "applications": [
                {"id": a.id, "interarrival": a.interarrival.to_dict(), "workload": a.workload.to_dict()}
                for a in self.applications
            ],
            "servers": [
                {
                    "id": s.id,
                    "speed_min": s.speed_min,
                    "speed_max": s.speed_max,
                    "power_base": s.power_base,
                    "power_coeff": s.power_coeff,
                    "power_exponent": s.power_exponent,
                    "apps": sorted(s.apps),
                    "sla_threshold": s.sla_threshold,
                    "sla_epsilon": s.sla_epsilon,
                }
                for s in self.servers
            ],
        }


@dataclass
class StaticPolicy:
    """Routing matrix ``routing[i, j]`` (apps x servers) and busy speeds per server."""

    routing: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        self.routing = np.asarray(self.routing, dtype=float)
        self.speeds = np.asarray(self.speeds, dtype=float)

    def validate(self, system: SystemSpec, tol: float = ROW_SUM_TOL) -> None:
        shape = (system.n_apps, system.n_servers)
        if self.routing.shape != shape:
            raise ConfigError(f"routing matrix has shape {self.routing.shape}, expected {shape}")
        if self.speeds.shape != (system.n_servers,):
            raise ConfigError(f"speed vector has length {self.speeds.size}, expected {system.n_servers}")
        P = self.routing
        if np.any(P < 0) or np.any(P > 1):
            raise ConfigError("routing probabilities must lie in [0, 1]")
        off = ~system.mask()
        if np.any(P[off] != 0):
            i, j = np.argwhere((P != 0) & off)[0]
            raise ConfigError(
                f"application {system.applications[i].id} routed to server "
                f"{system.servers[j].id} which does not host it"
            )
        rows = P.sum(axis=1)
        bad = np.abs(rows - 1) > tol
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ConfigError(f"routing row of application {system.applications[i].id} sums to {rows[i]}")
        lo = np.array([s.speed_min for s in system.servers])
        hi = np.array([s.speed_max for s in system.servers])
        # a tiny slack absorbs float noise from analytic roots
        slack = 1e-9 * hi
        bad = (self.speeds < lo - slack) | (self.speeds > hi + slack)
        if np.any(bad):
            j = int(np.argmax(bad))
            raise ConfigError(f"server {system.servers[j].id}: speed {self.speeds[j]} outside [{lo[j]}, {hi[j]}]")

    def to_dict(self) -> dict:
        return {"routing": self.routing.tolist(), "speeds": self.speeds.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StaticPolicy":
        try:
            routing, speeds = doc["routing"], doc["speeds"]
        except (KeyError, TypeError) as exc:
            raise ConfigError("policy document needs 'routing' and 'speeds'") from exc
        if not routing or not speeds:
            raise ConfigError("policy document is empty")
        return cls(np.array(routing, dtype=float), np.array(speeds, dtype=float))


# -- config ingestion ------------------------------------------------------

def _parse_text(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc


def _dist(d: Any, where: str) -> DistributionSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping with family/mean/scov")
    try:
        return DistributionSpec(str(d["family"]), float(d["mean"]), float(d["scov"]))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def system_from_dict(doc: Any) -> SystemSpec:
    if not isinstance(doc, dict) or "applications" not in doc or "servers" not in doc:
        raise ConfigError("config must contain 'applications' and 'servers' arrays")
    apps = []
    for k, a in enumerate(doc["applications"]):
        aid = a.get("id", k + 1)
        apps.append(
            ApplicationSpec(
                aid,
                _dist(a.get("interarrival"), f"application {aid} interarrival"),
                _dist(a.get("workload"), f"application {aid} workload"),
            )
        )
    servers = []
    for k, s in enumerate(doc["servers"]):
        sid = s.get("id", k + 1)
        try:
            servers.append(
                ServerSpec(
                    id=sid,
                    speed_min=float(s["speed_min"]),
                    speed_max=float(s["speed_max"]),
                    power_base=float(s["power_base"]),
                    power_coeff=float(s["power_coeff"]),
                    power_exponent=float(s.get("power_exponent", 3.0)),
                    apps=frozenset(s["apps"]),
                    sla_threshold=float(s["sla_threshold"]),
                    sla_epsilon=float(s["sla_epsilon"]),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"server {sid}: missing key {exc}") from exc
    return SystemSpec(apps, servers)


def load_system(config_text: str) -> SystemSpec:
    """Parse a JSON or YAML config document into a validated SystemSpec."""
    return system_from_dict(_parse_text(config_text))


def dump_system(system: SystemSpec) -> str:
    return json.dumps(system.to_dict(), indent=2)


def read_system(path) -> SystemSpec:
    return load_system(Path(path).read_text())


def load_policy(text: str) -> StaticPolicy:
    doc = _parse_text(text)
    if doc is None:
        raise ConfigError("policy document is empty")
    return StaticPolicy.from_dict(doc)


def read_policy(path) -> StaticPolicy:
    return load_policy(Path(path).read_text())


def benchmark_farm(delta: float = 4.0, epsilon: float = 0.01) -> SystemSpec:
    """The 5-application / 10-server benchmark farm."""
    rows = [
        (LOGNORMAL, 0.25, 2.0, 5.0, 1.5),
        (LOGNORMAL, 0.5, 1.5, 10.0, 2.0),
        (EXPONENTIAL, 0.25, 1.0, 5.0, 1.0),
        (LOGNORMAL, 0.1, 0.8, 2.0, 0.8),
        (LOGNORMAL, 0.2, 2.0, 3.0, 0.5),
    ]
    apps = [
        ApplicationSpec(i + 1, DistributionSpec(f, m, c), DistributionSpec(LOGNORMAL, wm, wc))
        for i, (f, m, c, wm, wc) in enumerate(rows)
    ]
    table = [
        (5, 100, 150, 1 / 3, {1}),
        (7, 102, 250, 0.2, {1}),
        (6, 99, 220, 1.0, {1, 2}),
        (5, 105, 150, 2 / 3, {1, 2, 3}),
        (7, 100, 300, 0.8, {2, 3}),
        (8, 102, 350, 0.4, {2, 3}),
        (6, 100, 220, 3 / 7, {3}),
        (7, 105, 350, 0.5, {4, 5}),
        (8, 102, 400, 0.6, {4, 5}),
        (10, 105, 700, 4 / 9, {5}),
    ]
    servers = [
        ServerSpec(j + 1, lo, hi, K, a, frozenset(A), delta, epsilon)
        for j, (lo, hi, K, a, A) in enumerate(table)
    ]
    return SystemSpec(apps, servers)
