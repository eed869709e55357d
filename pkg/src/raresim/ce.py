"""Cross-entropy search for an importance sampler and the resulting estimators.

A *rollout provider* is any callable ``provider(samples, batch_seed)`` that
maps an ``(N, dim)`` array of sample vectors to the ``N`` objective values
``f(X_i)`` in index order. Lower objective values are more dangerous; the rare
event is ``f(X) <= gamma``.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_CEILING
from typing import Callable, Sequence

import numpy as np

from ._seeding import derive_seed
from .expfam import (
    Family,
    NewtonError,
    ParamPoint,
    log_likelihood_ratio,
    mean_params,
    mean_to_natural,
    sample,
    sufficient_stats,
)

logger = logging.getLogger(__name__)

Provider = Callable[[np.ndarray, int], np.ndarray]

LEVEL_RULES = ("proxy", "literal")


class EmptyLevelSet(ValueError):
    """No sample fell at or below the current threshold."""


class RolloutError(RuntimeError):
    """A rollout failed permanently; ``history`` holds the iterations completed so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass
class CEConfig:
    rho: float = 0.01
    alpha: float | Sequence[float] = 0.8
    n_k: int | Sequence[int] = 5000
    K: int = 100
    gamma: float = 0.14
    seed: int = 0
    level_rule: str = "proxy"

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0,1)")
        if int(self.K) != self.K or self.K < 0:
            raise ValueError("K must be a non-negative integer")
        if self.level_rule not in LEVEL_RULES:
            raise ValueError(f"level_rule must be one of {LEVEL_RULES}")
        for k in range(self.K):
            a = self.alpha_at(k)
            if not 0.0 < a <= 1.0:
                raise ValueError("every step size must lie in (0,1]")
            if self.n_at(k) < 1:
                raise ValueError("every sample size must be >= 1")
        if math.isnan(self.gamma):
            raise ValueError("gamma must not be NaN")

    def alpha_at(self, k):
        return float(self.alpha if np.isscalar(self.alpha) else self.alpha[k])

    def n_at(self, k):
        return int(self.n_k if np.isscalar(self.n_k) else self.n_k[k])


@dataclass
class IterationRecord:
    k: int
    theta: ParamPoint
    gamma_k: float
    rho_quantile: float
    d_vector: np.ndarray
    level_mass: float
    rare_count: int
    n: int
    w_max: float
    w_min: float
    ess: float
    status: str = "ok"


@dataclass
class CEHistory:
    """Iterates ``theta_0..theta_K`` and one record per executed iteration."""

    family: Family
    theta0: ParamPoint
    config: CEConfig
    thetas: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def stalls(self):
        return sum(r.status != "ok" for r in self.records)


@dataclass(frozen=True)
class EstimateReport:
    p_hat: float
    std_err: float
    n: int
    gamma_test: float
    rare_count: int
    method: str
    ess: float


def quantile(values, rho: float) -> float:
    """The ``ceil(rho * N)``-th smallest value (lower empirical quantile)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0,1)")
    k = order_index(rho, values.size)
    return float(np.partition(values, k - 1)[k - 1])


def order_index(rho: float, n: int) -> int:
    # Decimal keeps 0.01 * 5000 at exactly 50 instead of the binary 50.000...01.
    k = int((Decimal(repr(rho)) * n).to_integral_value(ROUND_CEILING))
    return min(max(k, 1), n)


def level_threshold(gamma: float, q: float, rule: str = "proxy") -> float:
    """Per-iteration threshold from the target ``gamma`` and the rho-quantile ``q``.

    ``"literal"`` is ``min(gamma, q)``; ``"proxy"`` is ``max(gamma, q)``, which
    keeps the threshold at or above ``gamma`` so the level set stays populated
    early on and the search stops deepening once ``q`` passes ``gamma``.
    """
    if rule == "literal":
        return min(gamma, q)
    if rule == "proxy":
        return max(gamma, q)
    raise ValueError(f"unknown level rule {rule!r}")


def importance_weights(family, theta0, theta, samples):
    return np.exp(log_likelihood_ratio(family, theta0, theta, samples))


def estimate_D(samples, f_values, gamma_k, family, theta0, theta_k, normalize=False):
    """``(1/N) sum_i w_i 1{f_i <= gamma_k} Gamma(X_i)`` with ``w_i = p_0/p_theta_k``.

    With ``normalize=True`` the sum is divided by the estimated level-set mass
    ``(1/N) sum_i w_i 1{f_i <= gamma_k}``, which turns it into an estimate of
    the conditional mean statistics.
    """
    samples = np.atleast_2d(samples)
    f_values = np.asarray(f_values, dtype=float)
    if samples.shape[0] != f_values.shape[0]:
        raise ValueError("samples and objective values are not aligned")
    ind = f_values <= gamma_k
    if not ind.any():
        raise EmptyLevelSet(f"no sample at or below {gamma_k!r}")
    w = importance_weights(family, theta0, theta_k, samples)
    coef = np.where(ind, w, 0.0)
    d = coef @ sufficient_stats(family, samples) / samples.shape[0]
    if normalize:
        d = d / (coef.sum() / samples.shape[0])
    return d


def ce_step(theta_k: ParamPoint, D, alpha_k: float, family: Family) -> ParamPoint:
    """Maximize ``alpha theta'D + (1 - alpha) theta' gradA(theta_k) - A(theta)`` over the box."""
    if alpha_k == 0.0:
        return theta_k
    target = alpha_k * np.asarray(D, dtype=float) + (1.0 - alpha_k) * mean_params(family, theta_k)
    return mean_to_natural(family, target, init=theta_k)


def draw_and_evaluate(family, theta, n, seed, provider):
    """Samples from ``P_theta`` plus their objective values; shared by all estimators."""
    xs = sample(family, theta, derive_seed(seed, 1), n)
    f = np.asarray(provider(xs, derive_seed(seed, 2)), dtype=float)
    if f.shape != (n,):
        raise ValueError(f"provider returned {f.shape} values for {n} samples")
    return xs, f


def run_ce(family: Family, theta0: ParamPoint, config: CEConfig, provider: Provider) -> CEHistory:
    """Run the cross-entropy iterations, starting from the base parameters."""
    family.check(theta0)
    history = CEHistory(family, theta0, config, thetas=[theta0])
    theta = theta0
    for k in range(config.K):
        n = config.n_at(k)
        try:
            xs, f = draw_and_evaluate(family, theta, n, derive_seed(config.seed, k), provider)
        except RolloutError as exc:
            exc.history = history
            raise
        q = quantile(f, config.rho)
        gamma_k = level_threshold(config.gamma, q, config.level_rule)
        w = importance_weights(family, theta0, theta, xs)
        ind = f <= gamma_k
        mass = float(np.sum(np.where(ind, w, 0.0)) / n)
        status = "ok"
        d = np.full(family.n_stats, np.nan)
        theta_next = theta
        try:
            d = estimate_D(xs, f, gamma_k, family, theta0, theta)
            theta_next = ce_step(theta, d / mass, config.alpha_at(k), family)
        except EmptyLevelSet:
            status = "empty"
            logger.warning("iteration %d: empty level set at %g, keeping the iterate", k, gamma_k)
        except NewtonError as exc:
            status = "newton"
            logger.warning("iteration %d: moment matching failed (%s), keeping the iterate", k, exc)
        w_max = float(w.max())
        history.records.append(IterationRecord(
            k=k,
            theta=theta,
            gamma_k=gamma_k,
            rho_quantile=q,
            d_vector=d,
            level_mass=mass,
            rare_count=int(np.count_nonzero(f <= config.gamma)),
            n=n,
            w_max=w_max,
            w_min=float(w.min()),
            ess=float(w.sum() / w_max) if w_max > 0 else 0.0,
            status=status,
        ))
        theta = theta_next
        history.thetas.append(theta)
    return history


def select_best(history: CEHistory) -> ParamPoint:
    """The iterate whose iteration had the smallest rho-quantile (earliest on ties)."""
    if not history.records:
        return history.thetas[0]
    best = min(history.records, key=lambda r: (r.rho_quantile, r.k))
    return best.theta


def _mean_and_stderr(summands):
    n = summands.shape[0]
    p = float(summands.sum() / n)
    var = float(np.mean((summands - p) ** 2))
    return p, math.sqrt(var / n)


def _reports(f, w, gamma_test, method):
    n = f.shape[0]
    w_max = float(w.max())
    ess = float(w.sum() / w_max) if w_max > 0 else 0.0
    out = []
    for g in gamma_test:
        ind = f <= g
        p, se = _mean_and_stderr(np.where(ind, w, 0.0))
        out.append(EstimateReport(p, se, n, float(g), int(np.count_nonzero(ind)), method, ess))
    return out


def estimate_is(theta_ce, family, theta0, n, gamma_test, provider, seed) -> list:
    """Importance-sampling estimates of ``P_0(f <= g)`` for every ``g`` in ``gamma_test``.

    One batch of ``n`` rollouts from ``P_theta_ce`` serves the whole grid.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs, f = draw_and_evaluate(family, theta_ce, n, seed, provider)
    w = importance_weights(family, theta0, theta_ce, xs)
    return _reports(f, w, gamma_test, "cross-entropy")


def estimate_naive(family, theta0, n, gamma_test, provider, seed) -> list:
    """Plain Monte Carlo estimates from ``P_0``; ``std_err = sqrt(p(1-p)/n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    _, f = draw_and_evaluate(family, theta0, n, seed, provider)
    return _reports(f, np.ones(n), gamma_test, "naive")
