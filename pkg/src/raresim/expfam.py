"""Products of natural exponential families used as importance samplers.

Two block kinds are supported:

* :class:`BetaBlock` -- ``k`` independent scaled Beta coordinates,
  ``x = lo + (hi - lo) * u`` with ``u ~ Beta(alpha, beta)``. Natural parameters
  are ``(alpha - 1, beta - 1)``, sufficient statistics ``(ln u, ln(1 - u))``
  and the log partition is ``ln B(alpha, beta)``.
* :class:`GaussianBlock` -- ``N(mu, Sigma)`` with ``Sigma`` fixed. Relative to
  the ``N(0, Sigma)`` base measure the natural parameter is ``Sigma^-1 mu``;
  the mean parameter is ``mu`` itself, which is what :class:`ParamPoint` stores.

A :class:`Family` is an ordered list of blocks; sample vectors concatenate the
block coordinates in that order and sufficient statistics concatenate the
block statistics in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import betaln, digamma, polygamma


EPS = 1e-12
SHAPE_BOUNDS = (1.5, 7.0)


class NewtonError(ArithmeticError):
    """Moment matching for a Beta block did not converge."""

    def __init__(self, message, residual=math.inf):
        super().__init__(message)
        self.residual = residual


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BetaBlock:
    lo: np.ndarray
    hi: np.ndarray
    shape_bounds: tuple = SHAPE_BOUNDS
    name: str = "beta"

    def __post_init__(self):
        lo = _readonly(np.atleast_1d(self.lo))
        hi = _readonly(np.atleast_1d(self.hi))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"{self.name}: lo and hi must be 1-D arrays of equal length")
        if not np.all(hi > lo):
            raise ValueError(f"{self.name}: hi must exceed lo")
        lb, ub = self.shape_bounds
        if not 0 < lb <= ub:
            raise ValueError(f"{self.name}: invalid shape bounds {self.shape_bounds}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def n_stats(self):
        return 2 * self.dim

    def check(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (2, self.dim):
            raise ValueError(f"{self.name}: expected parameters of shape (2, {self.dim}), got {p.shape}")
        if not np.all((p > 0) & np.isfinite(p)):
            raise ValueError(f"{self.name}: Beta shapes must be positive and finite")
        return p

    def _unit(self, x):
        return (x - self.lo) / (self.hi - self.lo)

    def stats(self, x):
        u = np.clip(self._unit(x), EPS, 1.0 - EPS)
        return np.concatenate([np.log(u), np.log1p(-u)], axis=-1)

    def log_density(self, p, x):
        a, b = p
        u_raw = self._unit(x)
        u = np.clip(u_raw, EPS, 1.0 - EPS)
        terms = (
            (a - 1.0) * np.log(u)
            + (b - 1.0) * np.log1p(-u)
            - betaln(a, b)
            - np.log(self.hi - self.lo)
        )
        out = terms.sum(axis=-1)
        outside = np.any((u_raw < 0.0) | (u_raw > 1.0), axis=-1)
        return np.where(outside, -np.inf, out)

    def log_ratio(self, p0, p, x):
        # Jacobians cancel; computed as one difference so p0 == p gives exactly 0.
        a0, b0 = p0
        a, b = p
        u = np.clip(self._unit(x), EPS, 1.0 - EPS)
        terms = (a0 - a) * np.log(u) + (b0 - b) * np.log1p(-u) - (betaln(a0, b0) - betaln(a, b))
        return terms.sum(axis=-1)

    def log_partition(self, p):
        a, b = p
        return float(np.sum(betaln(a, b)))

    def sample(self, p, rng, n):
        a, b = p
        u = rng.beta(a, b, size=(n, self.dim))
        return self.lo + (self.hi - self.lo) * u

    def mean_params(self, p):
        a, b = p
        s = digamma(a + b)
        return np.concatenate([digamma(a) - s, digamma(b) - s])

    def from_mean(self, eta, init):
        k = self.dim
        out = np.empty((2, k))
        for j in range(k):
            out[:, j] = solve_beta_moments(eta[j], eta[k + j], init[0, j], init[1, j])
        return out

    def project(self, p):
        return np.clip(p, *self.shape_bounds)

    def in_box(self, p, tol=0.0):
        lb, ub = self.shape_bounds
        return bool(np.all(p >= lb - tol) and np.all(p <= ub + tol))

    def flat_names(self):
        return [f"{self.name}.alpha[{j}]" for j in range(self.dim)] + [
            f"{self.name}.beta[{j}]" for j in range(self.dim)
        ]


@dataclass(frozen=True, eq=False)
class GaussianBlock:
    mu0: np.ndarray
    chol: np.ndarray
    box: float = math.inf
    name: str = "xi"
    _logdet: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        mu0 = _readonly(np.atleast_1d(self.mu0))
        chol = np.array(np.atleast_2d(self.chol), dtype=float)
        d = mu0.shape[0]
        if chol.shape != (d, d):
            raise ValueError(f"{self.name}: Cholesky factor must be {d}x{d}, got {chol.shape}")
        if np.any(np.triu(chol, 1) != 0.0):
            raise ValueError(f"{self.name}: Cholesky factor must be lower triangular")
        diag = np.diag(chol)
        if not np.all(diag > 0):
            raise ValueError(f"{self.name}: covariance is not positive definite")
        if not self.box >= 0:
            raise ValueError(f"{self.name}: box half-width must be >= 0")
        chol.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "_logdet", float(2.0 * np.sum(np.log(diag))))

    @classmethod
    def from_covariance(cls, mu0, sigma, box=math.inf, name="xi"):
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if not np.allclose(sigma, sigma.T):
            raise ValueError(f"{name}: covariance must be symmetric")
        return cls(mu0, np.linalg.cholesky(sigma), box, name)

    @property
    def sigma(self):
        return self.chol @ self.chol.T

    @property
    def dim(self):
        return self.mu0.shape[0]

    @property
    def n_stats(self):
        return self.dim

    def check(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected mean of shape ({self.dim},), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"{self.name}: mean must be finite")
        return p

    def _whiten(self, r):
        # Solves L z = r for every row of r.
        from scipy.linalg import solve_triangular

        flat = r.reshape(-1, self.dim)
        z = solve_triangular(self.chol, flat.T, lower=True).T
        return z.reshape(r.shape)

    def stats(self, x):
        return np.array(x, dtype=float)

    def log_density(self, mu, x):
        z = self._whiten(x - mu)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * (self.dim * math.log(2 * math.pi) + self._logdet)

    def log_ratio(self, mu0, mu, x):
        z0 = self._whiten(x - mu0)
        z = self._whiten(x - mu)
        return 0.5 * (np.sum(z * z, axis=-1) - np.sum(z0 * z0, axis=-1))

    def log_partition(self, mu):
        # In the natural parameter t = Sigma^-1 mu, A(t) = t' Sigma t / 2 = |L^-1 mu|^2 / 2.
        z = self._whiten(mu)
        return 0.5 * float(z @ z)

    def sample(self, mu, rng, n):
        z = rng.standard_normal((n, self.dim))
        return mu + z @ self.chol.T

    def mean_params(self, mu):
        return np.array(mu, dtype=float)

    def from_mean(self, eta, init):
        return np.array(eta, dtype=float)

    def project(self, mu):
        if math.isinf(self.box):
            return mu
        return np.clip(mu, self.mu0 - self.box, self.mu0 + self.box)

    def in_box(self, mu, tol=0.0):
        if math.isinf(self.box):
            return True
        # Same endpoints as project(): |mu - mu0| itself can round one ulp above box.
        lo = self.mu0 - self.box - tol
        hi = self.mu0 + self.box + tol
        return bool(np.all((mu >= lo) & (mu <= hi)))

    def flat_names(self):
        return [f"{self.name}.mu[{j}]" for j in range(self.dim)]


Block = Union[BetaBlock, GaussianBlock]


@dataclass(frozen=True, eq=False)
class ParamPoint:
    """One parameter setting: ``(2, k)`` shape arrays for Beta blocks, ``mu`` for Gaussian blocks."""

    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(_readonly(v) for v in self.values))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def flat(self):
        return np.concatenate([np.ravel(v) for v in self.values]) if self.values else np.empty(0)

    def equals(self, other):
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.values, other.values)
        )

    def __repr__(self):
        return f"ParamPoint({[v.tolist() for v in self.values]})"


class Family:
    """Ordered product of exponential-family blocks."""

    def __init__(self, blocks: Sequence[Block]):
        self.blocks = tuple(blocks)
        self._x_slices = []
        self._s_slices = []
        i = s = 0
        for blk in self.blocks:
            self._x_slices.append(slice(i, i + blk.dim))
            self._s_slices.append(slice(s, s + blk.n_stats))
            i += blk.dim
            s += blk.n_stats
        self.dim = i
        self.n_stats = s

    def __repr__(self):
        return f"Family({[type(b).__name__ + ':' + b.name for b in self.blocks]}, dim={self.dim})"

    def check(self, theta: ParamPoint):
        if len(theta) != len(self.blocks):
            raise ValueError(f"parameter has {len(theta)} blocks, family has {len(self.blocks)}")
        for blk, p in zip(self.blocks, theta.values):
            blk.check(p)
        return theta

    def check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim or x.ndim not in (1, 2):
            raise ValueError(f"sample has shape {x.shape}, family dimension is {self.dim}")
        return x

    def x_slice(self, i):
        return self._x_slices[i]

    def stats_slice(self, i):
        return self._s_slices[i]

    def in_box(self, theta: ParamPoint, tol=0.0):
        return all(blk.in_box(p, tol) for blk, p in zip(self.blocks, theta.values))

    def project(self, theta: ParamPoint):
        return ParamPoint(tuple(blk.project(p) for blk, p in zip(self.blocks, theta.values)))

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=float)
        values, i = [], 0
        for blk in self.blocks:
            if isinstance(blk, BetaBlock):
                n = 2 * blk.dim
                values.append(flat[i:i + n].reshape(2, blk.dim))
            else:
                n = blk.dim
                values.append(flat[i:i + n])
            i += n
        if i != flat.size:
            raise ValueError(f"flat parameter has length {flat.size}, family needs {i}")
        return self.check(ParamPoint(tuple(values)))

    def param_names(self):
        return [n for blk in self.blocks for n in blk.flat_names()]

    def stat_names(self):
        names = []
        for blk in self.blocks:
            if isinstance(blk, BetaBlock):
                names += [f"{blk.name}.lnu[{j}]" for j in range(blk.dim)]
                names += [f"{blk.name}.ln1mu[{j}]" for j in range(blk.dim)]
            else:
                names += [f"{blk.name}.x[{j}]" for j in range(blk.dim)]
        return names


def _scalar_if_1d(x, out):
    return float(out) if np.ndim(x) == 1 else out


def log_density(family: Family, theta: ParamPoint, x):
    """Log density of ``x`` (one vector or an ``(N, dim)`` array) under ``theta``.

    Scaled Beta coordinates include their ``-ln(hi - lo)`` Jacobian. Points
    outside a Beta support give ``-inf``.
    """
    family.check(theta)
    x = family.check_x(x)
    total = np.zeros(x.shape[:-1])
    for i, blk in enumerate(family.blocks):
        total = total + blk.log_density(theta[i], x[..., family.x_slice(i)])
    return _scalar_if_1d(x, total)


def log_likelihood_ratio(family: Family, theta0: ParamPoint, theta: ParamPoint, x):
    """``ln p_theta0(x) - ln p_theta(x)`` as a sum of per-block log differences."""
    family.check(theta0)
    family.check(theta)
    x = family.check_x(x)
    total = np.zeros(x.shape[:-1])
    for i, blk in enumerate(family.blocks):
        total = total + blk.log_ratio(theta0[i], theta[i], x[..., family.x_slice(i)])
    return _scalar_if_1d(x, total)


def log_partition(family: Family, theta: ParamPoint) -> float:
    family.check(theta)
    return sum(blk.log_partition(p) for blk, p in zip(family.blocks, theta.values))


def sample(family: Family, theta: ParamPoint, seed: int, n: int | None = None):
    """Draw from ``P_theta``; a deterministic function of ``(theta, seed, n)``.

    Returns one vector when ``n`` is None, else an ``(n, dim)`` array.
    """
    family.check(theta)
    rng = np.random.default_rng(seed)
    m = 1 if n is None else int(n)
    parts = [blk.sample(p, rng, m) for blk, p in zip(family.blocks, theta.values)]
    out = np.concatenate(parts, axis=1) if parts else np.empty((m, 0))
    return out[0] if n is None else out


def sufficient_stats(family: Family, x):
    x = family.check_x(x)
    return np.concatenate(
        [blk.stats(x[..., family.x_slice(i)]) for i, blk in enumerate(family.blocks)], axis=-1
    )


def mean_params(family: Family, theta: ParamPoint):
    """Gradient of the log partition, laid out like :func:`sufficient_stats`."""
    family.check(theta)
    return np.concatenate([blk.mean_params(p) for blk, p in zip(family.blocks, theta.values)])


def mean_to_natural(family: Family, eta, init: ParamPoint | None = None, project: bool = True):
    """Invert :func:`mean_params`, then project onto the search box.

    ``init`` seeds the Beta Newton solves (defaults to Beta(2, 2) everywhere).
    Raises :class:`NewtonError` when a Beta block cannot be matched.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (family.n_stats,):
        raise ValueError(f"mean vector has shape {eta.shape}, expected ({family.n_stats},)")
    if init is None:
        init = ParamPoint(tuple(
            np.full((2, b.dim), 2.0) if isinstance(b, BetaBlock) else b.mu0 for b in family.blocks
        ))
    family.check(init)
    values = []
    for i, blk in enumerate(family.blocks):
        p = blk.from_mean(eta[family.stats_slice(i)], init[i])
        values.append(blk.project(p) if project else p)
    return ParamPoint(tuple(values))


def _beta_residual(a, b, e1, e2):
    s = digamma(a + b)
    return np.array([digamma(a) - s - e1, digamma(b) - s - e2])


def _beta_guess(e1, e2):
    # psi(x) ~ ln(x - 1/2) turns the system into a linear one.
    g1, g2 = math.exp(e1), math.exp(e2)
    s = 0.5 / (1.0 - g1 - g2)
    return 0.5 + g1 * s, 0.5 + g2 * s


def solve_beta_moments(e1, e2, a0, b0, tol=1e-10, max_iter=100):
    """Solve ``psi(a) - psi(a+b) = e1``, ``psi(b) - psi(a+b) = e2`` for ``(a, b)``.

    Damped Newton with step halving from ``(a0, b0)``; if that stalls, one more
    attempt starts from an asymptotic closed-form guess.
    """
    e1, e2 = float(e1), float(e2)
    if not (e1 < 0 and e2 < 0 and math.exp(e1) + math.exp(e2) < 1.0):
        raise NewtonError(f"mean statistics ({e1}, {e2}) are not realizable by a Beta law")
    best = math.inf
    for start in ((a0, b0), _beta_guess(e1, e2)):
        try:
            return _newton(e1, e2, float(start[0]), float(start[1]), tol, max_iter)
        except NewtonError as exc:
            best = min(best, exc.residual)
    raise NewtonError(f"Beta moment matching failed for ({e1}, {e2})", best)


def _newton(e1, e2, a, b, tol, max_iter):
    # Iterates past ``tol`` while the residual still drops: quadratic convergence
    # makes the extra steps cheap and tightens (a, b) where the Jacobian is flat.
    r = _beta_residual(a, b, e1, e2)
    err = np.max(np.abs(r))
    for _ in range(max_iter):
        if err <= 1e-15:
            break
        t_a, t_b, t_ab = polygamma(1, (a, b, a + b))
        jac = np.array([[t_a - t_ab, -t_ab], [-t_ab, t_b - t_ab]])
        step = np.linalg.solve(jac, -r)
        t = 1.0
        while t > 1e-12:
            na, nb = a + t * step[0], b + t * step[1]
            if na > 0 and nb > 0:
                nr = _beta_residual(na, nb, e1, e2)
                nerr = np.max(np.abs(nr))
                if nerr < err:
                    break
            t *= 0.5
        else:
            if err <= tol:
                break
            raise NewtonError("line search failed", err)
        a, b, r, err = na, nb, nr, nerr
    if err <= tol:
        return a, b
    raise NewtonError(f"no convergence after {max_iter} iterations", err)
