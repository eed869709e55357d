"""Fit the surrogate environment-driver weights ``mu0`` and their covariance.

A scripted controller (speed tracking, proportional lane keeping and
range-based braking) labels randomly drawn states; the linear feature policy
is fit to those labels by least squares. The covariance is the usual OLS
parameter covariance ``s^2 (X'X)^+`` per output, plus a diagonal load.

Run ``raresim fit-policy --out DIR`` to regenerate the shipped files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import _kernels as K
from .sim.core import feature_dim


@dataclass(frozen=True)
class ScriptedDriver:
    target_speed: float = 15.0
    k_speed: float = 0.5
    k_lateral: float = 0.15
    k_heading: float = 3.0
    brake_gain: float = 0.4
    brake_range: float = 40.0

    def action(self, speed, offset, heading, front_range, front_rate):
        accel = self.k_speed * (self.target_speed - speed)
        closing = max(0.0, -front_rate)
        accel -= self.brake_gain * closing * max(0.0, 1.0 - front_range / self.brake_range)
        steer = -self.k_lateral * offset - self.k_heading * heading
        return K.clamp_action(accel, steer)


def fit_policy(n_beams=5, n_samples=20000, lane_width=3.7, max_range=100.0,
               diag_load=1e-4, seed=0, driver=ScriptedDriver()):
    """Return ``(mu0, sigma0)`` for a policy seeing ``n_beams`` lidar beams."""
    rng = np.random.default_rng(seed)
    f = feature_dim(n_beams)
    road = np.array([2000.0, 6.0, lane_width])
    X = np.empty((n_samples, f))
    Y = np.empty((n_samples, 2))
    for i in range(n_samples):
        lane = rng.integers(0, 6)
        offset = rng.uniform(-0.5, 0.5) * lane_width
        heading = rng.uniform(-0.1, 0.1)
        speed = rng.uniform(0.0, 35.0)
        hit = rng.random(n_beams) < 0.5
        ranges = np.where(hit, rng.uniform(1.0, max_range, n_beams), max_range)
        rates = np.where(hit, rng.uniform(-15.0, 15.0, n_beams), 0.0)
        state = np.array([0.0, (lane + 0.5) * lane_width + offset, heading, speed])
        K.features(state, ranges, rates, road, max_range, X[i])
        Y[i] = driver.action(speed, offset, heading, ranges[0], rates[0])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    dof = max(n_samples - np.linalg.matrix_rank(X), 1)
    gram_pinv = np.linalg.pinv(X.T @ X)
    blocks = [resid[:, o] @ resid[:, o] / dof * gram_pinv for o in range(2)]
    sigma = np.zeros((2 * f, 2 * f))
    sigma[:f, :f] = blocks[0]
    sigma[f:, f:] = blocks[1]
    sigma = 0.5 * (sigma + sigma.T) + diag_load * np.eye(2 * f)
    mu0 = coef.T.reshape(-1)
    return mu0, sigma
