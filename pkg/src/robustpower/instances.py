"""Random farm instances for scalability runs."""

from __future__ import annotations

import numpy as np

from .primitives import EXPONENTIAL, LOGNORMAL, ApplicationSpec, DistributionSpec, ServerSpec, SystemSpec


def random_system(n_servers: int, ratio: int = 10, seed: int = 0, delta: float = 4.0,
                  epsilon: float = 0.01) -> SystemSpec:
    """A farm with ``n_servers // ratio`` applications and ``n_servers`` servers.

    Parameter ranges follow the benchmark farm, with arrival rates scaled by the
    ratio so each server still sees a few jobs per unit time.  Server j hosts
    its "home" application plus, with some probability, one or two neighbours,
    so every application has about ``ratio`` hosts or more.
    """
    if n_servers < ratio or ratio < 1:
        raise ValueError("need n_servers >= ratio >= 1")
    rng = np.random.default_rng(seed)
    n_apps = n_servers // ratio
    apps = []
    for i in range(n_apps):
        family = LOGNORMAL if rng.random() < 0.8 else EXPONENTIAL
        mean_gap = rng.uniform(0.1, 0.5) / ratio
        scov = 1.0 if family == EXPONENTIAL else rng.uniform(0.8, 2.0)
        work = DistributionSpec(LOGNORMAL, rng.uniform(2.0, 10.0), rng.uniform(0.5, 2.0))
        apps.append(ApplicationSpec(i + 1, DistributionSpec(family, mean_gap, scov), work))
    servers = []
    for j in range(n_servers):
        home = j * n_apps // n_servers
        hosted = {home + 1}
        for step in (1, 2):
            if rng.random() < 0.5:
                hosted.add((home + step) % n_apps + 1)
        servers.append(ServerSpec(
            id=j + 1,
            speed_min=float(rng.integers(5, 11)),
            speed_max=float(rng.integers(99, 106)),
            power_base=float(rng.integers(150, 701)),
            power_coeff=float(rng.uniform(0.2, 1.0)),
            apps=frozenset(hosted),
            sla_threshold=delta,
            sla_epsilon=epsilon,
        ))
    return SystemSpec(apps, servers)
