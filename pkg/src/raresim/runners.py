"""Objects that turn one ``(sample, seed)`` into a :class:`RolloutResult`.

A runner exposes ``scenario_hash`` (32 bytes), ``family``, ``theta0`` and
``run(sample, seed)``. Runners are pickled into worker processes, so keep
them plain data.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from pathlib import Path

import numpy as np

from ._seeding import derive_seed
from .expfam import Family, GaussianBlock, ParamPoint, log_density
from .scenario import ScenarioSpec, base_family, scenario_hash
from .sim.rollout import TTC_SENTINEL, RolloutResult, SimulationDiverged, rollout

logger = logging.getLogger(__name__)


class HighwayRunner:
    def __init__(self, spec: ScenarioSpec, ego=None):
        self.spec = spec
        self.ego = ego
        self.scenario_hash = scenario_hash(spec)
        self.concurrent_safe = getattr(ego, "concurrent_safe", True)

    @property
    def family(self):
        return base_family(self.spec)[0]

    @property
    def theta0(self):
        return base_family(self.spec)[1]

    def run(self, sample, seed):
        try:
            return rollout(sample, self.spec, self.ego, seed)
        except SimulationDiverged as exc:
            # Treated as "nothing dangerous happened" rather than failing the batch.
            logger.warning("rollout with seed %d diverged (%s); reporting f = +inf", seed, exc)
            log_p0 = log_density(self.family, self.theta0, sample)
            return RolloutResult(TTC_SENTINEL, False, None, 0, float(log_p0), int(seed))


_TOY_FAMILY = Family([GaussianBlock(np.zeros(1), np.eye(1), box=math.inf, name="x")])
_TOY_THETA0 = ParamPoint((np.zeros(1),))


class ToyGaussianRunner:
    """One standard normal coordinate with ``f(x) = x``; ``P(f <= g) = Phi(g)``."""

    scenario_hash = hashlib.sha256(b"raresim toy gaussian v1").digest()
    family = _TOY_FAMILY
    theta0 = _TOY_THETA0
    concurrent_safe = True

    def run(self, sample, seed):
        x = float(np.asarray(sample, dtype=float).reshape(-1)[0])
        log_p0 = log_density(self.family, self.theta0, np.array([x]))
        return RolloutResult(x, False, None, 0, float(log_p0), int(seed))


class BernoulliRunner:
    """``f`` is a coin seeded by the task seed: 0 with probability ``p``, else 1."""

    family = _TOY_FAMILY
    theta0 = _TOY_THETA0
    concurrent_safe = True

    def __init__(self, p):
        self.p = float(p)
        self.scenario_hash = hashlib.sha256(f"raresim bernoulli {self.p!r}".encode()).digest()

    def run(self, sample, seed):
        u = np.random.default_rng(seed).random()
        return RolloutResult(0.0 if u < self.p else 1.0, False, None, 0, 0.0, int(seed))


class FlakyRunner:
    """Wraps a runner and kills its own process on selected tasks, once per task.

    A task dies if its seed is in ``kill_seeds`` or if a hash of
    ``(fault_seed, seed)`` falls below ``rate``. A marker file per seed in
    ``marker_dir`` makes the retry succeed. Process-mode workers only.
    """

    def __init__(self, inner, marker_dir, kill_seeds=(), rate=0.0, fault_seed=0):
        self.inner = inner
        self.marker_dir = str(marker_dir)
        self.kill_seeds = frozenset(int(s) for s in kill_seeds)
        self.rate = float(rate)
        self.fault_seed = int(fault_seed)
        self.scenario_hash = inner.scenario_hash
        self.concurrent_safe = getattr(inner, "concurrent_safe", True)

    @property
    def family(self):
        return self.inner.family

    @property
    def theta0(self):
        return self.inner.theta0

    def _doomed(self, seed):
        if seed in self.kill_seeds:
            return True
        return derive_seed(self.fault_seed, seed) / 2.0**63 < self.rate

    def run(self, sample, seed):
        if self._doomed(seed):
            marker = Path(self.marker_dir) / f"killed-{seed}"
            try:
                fd = os.open(marker, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                pass
            else:
                os.close(fd)
                os._exit(17)
        return self.inner.run(sample, seed)
