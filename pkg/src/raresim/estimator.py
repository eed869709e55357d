"""Estimator-style front end over :mod:`raresim.ce`.

Hyperparameters go to ``__init__``, ``fit`` learns the sampling parameters
from a runner, fitted state ends in a trailing underscore::

    sampler = CrossEntropySampler(rho=0.1, K=20, n_k=1000, gamma=-3.0).fit(ToyGaussianRunner())
    reports = sampler.estimate(10_000, [-3.0], seed=7)
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .ce import CEConfig, estimate_is, estimate_naive, run_ce, select_best
from .orchestrator import RolloutProvider


class CrossEntropySampler(BaseEstimator):
    def __init__(self, rho=0.01, alpha=0.8, n_k=5000, K=100, gamma=0.14, seed=0, level_rule="proxy"):
        self.rho = rho
        self.alpha = alpha
        self.n_k = n_k
        self.K = K
        self.gamma = gamma
        self.seed = seed
        self.level_rule = level_rule

    def _config(self):
        return CEConfig(rho=self.rho, alpha=self.alpha, n_k=self.n_k, K=self.K,
                        gamma=self.gamma, seed=self.seed, level_rule=self.level_rule)

    def fit(self, runner, pool=None):
        """Run the search; ``pool`` is an optional :class:`WorkerPool` for the rollouts."""
        self.runner_ = runner
        self.provider_ = RolloutProvider(runner, pool)
        self.history_ = run_ce(runner.family, runner.theta0, self._config(), self.provider_)
        self.theta_ = select_best(self.history_)
        return self

    def estimate(self, n, gamma_test, seed=0):
        return estimate_is(self.theta_, self.runner_.family, self.runner_.theta0, n,
                           gamma_test, self.provider_, seed)


class NaiveMC(BaseEstimator):
    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, runner, pool=None):
        self.runner_ = runner
        self.provider_ = RolloutProvider(runner, pool)
        return self

    def estimate(self, n, gamma_test, seed=None):
        seed = self.seed if seed is None else seed
        return estimate_naive(self.runner_.family, self.runner_.theta0, n, gamma_test,
                              self.provider_, seed)
