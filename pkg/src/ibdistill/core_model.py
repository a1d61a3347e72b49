"""Probabilistic models and the covariance/entropy algebra shared by every solver.

All entropies are differential (Gaussian) or Shannon (discrete) entropies in
nats. The Gaussian model is ``x | theta ~ N(theta, sigma_x)`` with prior
``theta ~ N(0, sigma_theta)``; the discrete model is a finite parameter grid
with a row-stochastic likelihood table.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

LOG_2PIE = math.log(2.0 * math.pi * math.e)
SYM_TOL = 1e-10
PROB_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a covariance is not symmetric positive definite, or an
    input lies outside the domain of an operation."""


def _as_matrix(a) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {m.shape}")
    return m


def check_spd(sigma, name: str = "covariance") -> np.ndarray:
    """Return ``sigma`` as a float matrix, raising DomainError unless it is
    symmetric (within 1e-10) and positive definite."""
    m = _as_matrix(sigma)
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(m))):
        raise DomainError(f"{name} is not symmetric")
    try:
        linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise DomainError(f"{name} is not positive definite") from exc
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class GaussianModel:
    """Gaussian location family with a zero-mean Gaussian prior."""

    sigma_x: np.ndarray
    sigma_theta: np.ndarray

    def __post_init__(self):
        sx = check_spd(self.sigma_x, "sigma_x")
        st = check_spd(self.sigma_theta, "sigma_theta")
        if sx.shape != st.shape:
            raise DomainError(f"shape mismatch: sigma_x {sx.shape} vs sigma_theta {st.shape}")
        sx.setflags(write=False)
        st.setflags(write=False)
        object.__setattr__(self, "sigma_x", sx)
        object.__setattr__(self, "sigma_theta", st)

    @property
    def d(self) -> int:
        return self.sigma_x.shape[0]

    @classmethod
    def scalar(cls, var_x: float = 1.0, var_theta: float = 1.0) -> "GaussianModel":
        return cls(np.array([[var_x]]), np.array([[var_theta]]))

    @classmethod
    def random(cls, d: int, seed: int) -> "GaussianModel":
        """Random model with both covariances from :func:`make_random_spd`.

        ``sigma_x`` uses generator seed ``2*seed`` and ``sigma_theta`` uses
        ``2*seed + 1`` so distinct model seeds never share a draw.
        """
        return cls(make_random_spd(d, 2 * seed), make_random_spd(d, 2 * seed + 1))

    @property
    def sigma_marginal(self) -> np.ndarray:
        """Covariance of a fresh test point X."""
        return self.sigma_x + self.sigma_theta

    def sample_mean_cov(self, k: int) -> np.ndarray:
        """Covariance of the sample mean of ``k`` draws."""
        if k < 1:
            raise DomainError("sample mean needs k >= 1")
        return self.sigma_x / k + self.sigma_theta


@dataclass(frozen=True)
class DiscreteFamily:
    """Finite parametric family: ``likelihood[j, x] = p(x | params[j])``."""

    params: tuple
    prior: np.ndarray
    likelihood: np.ndarray

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=float).ravel()
        lik = np.atleast_2d(np.asarray(self.likelihood, dtype=float))
        if lik.shape[0] != prior.size:
            raise DomainError(f"likelihood has {lik.shape[0]} rows but prior has {prior.size} entries")
        if len(self.params) != prior.size:
            raise DomainError("params and prior lengths differ")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > PROB_TOL:
            raise DomainError("prior must be a probability vector")
        if np.any(lik < 0) or np.max(np.abs(lik.sum(axis=1) - 1.0)) > PROB_TOL:
            raise DomainError("every likelihood row must be a probability vector")
        prior.setflags(write=False)
        lik.setflags(write=False)
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "likelihood", lik)

    @property
    def alphabet_size(self) -> int:
        return self.likelihood.shape[1]

    @classmethod
    def bernoulli(cls, thetas: Sequence[float], prior: Optional[Sequence[float]] = None) -> "DiscreteFamily":
        """Bernoulli family over {0, 1} with ``p(x=1 | theta) = theta``."""
        thetas = np.asarray(thetas, dtype=float)
        if prior is None:
            prior = np.full(thetas.size, 1.0 / thetas.size)
        prior = np.asarray(prior, dtype=float)
        lik = np.column_stack([1.0 - thetas, thetas])
        return cls(tuple(thetas.tolist()), prior / prior.sum(), lik)

    @classmethod
    def bernoulli_uniform(cls, grid_size: int = 101) -> "DiscreteFamily":
        """Uniform prior on [0, 1] discretized to an equispaced grid with
        trapezoid weights."""
        if grid_size < 2:
            raise DomainError("grid_size must be >= 2")
        thetas = np.linspace(0.0, 1.0, grid_size)
        w = np.ones(grid_size)
        w[0] = w[-1] = 0.5
        return cls.bernoulli(thetas, w / w.sum())

    def predictive(self) -> np.ndarray:
        """Prior predictive p(x)."""
        return self.prior @ self.likelihood

    def entropy_x(self) -> float:
        return shannon_entropy(self.predictive())

    def entropy_theta(self) -> float:
        return shannon_entropy(self.prior)


@dataclass(frozen=True)
class Histogram:
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise DomainError("histogram counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def k(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class RDPoint:
    """One point of a rate-distortion curve; rate and distortion in nats.

    ``beta`` is NaN for points not produced by a Lagrangian sweep (oracle
    envelopes, rate-budget inversions that saturated, ...).
    """

    beta: float
    rate: float
    distortion: float
    n_active: int = 0
    converged: bool = True

    def __post_init__(self):
        if self.rate < -1e-9:
            raise DomainError(f"negative rate {self.rate}")
        if not math.isnan(self.beta) and self.beta < 0:
            raise DomainError(f"negative beta {self.beta}")
        if self.n_active < 0:
            raise DomainError("n_active must be >= 0")
        object.__setattr__(self, "rate", max(0.0, float(self.rate)))


def shannon_entropy(p) -> float:
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def make_random_spd(d: int, seed: int) -> np.ndarray:
    """Symmetrized standard-normal matrix, shifted so its smallest eigenvalue
    is at least 0.1."""
    if d < 1:
        raise DomainError("d must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    m = (g + g.T) / 2.0
    lam_min = float(np.linalg.eigvalsh(m)[0])
    if lam_min <= 0.1:
        m = m + (abs(lam_min) + 0.1) * np.eye(d)
    return m


def gaussian_entropy(sigma) -> float:
    """Differential entropy 0.5 * log det(2 pi e sigma) in nats."""
    m = check_spd(sigma)
    chol = linalg.cholesky(m, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * (m.shape[0] * LOG_2PIE + logdet)


def logdet_spd(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    chol = linalg.cholesky(check_spd(m), lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def posterior_theta_cov(model: GaussianModel, k: int) -> np.ndarray:
    """Posterior covariance of theta after ``k`` observations."""
    if k < 0:
        raise DomainError("k must be >= 0")
    if k == 0:
        return np.array(model.sigma_theta)
    prec = np.linalg.inv(model.sigma_theta) + k * np.linalg.inv(model.sigma_x)
    return symmetrize(np.linalg.inv(prec))


def entropy_triple(model: GaussianModel, k: int) -> tuple[float, float, float]:
    """(h(X), h(X | X^k), h(X | theta)) in nats."""
    h_x = gaussian_entropy(model.sigma_marginal)
    h_x_given_data = gaussian_entropy(model.sigma_x + posterior_theta_cov(model, k))
    h_x_given_theta = gaussian_entropy(model.sigma_x)
    return h_x, h_x_given_data, h_x_given_theta


def sample_mean_joint_cov(model: GaussianModel, rounds: int) -> np.ndarray:
    """Joint covariance of the running sample means (S_1, ..., S_l).

    Block (i, j) is ``sigma_theta + sigma_x / max(i, j)``; the shared prior
    draw contributes sigma_theta and the overlapping noise sums contribute
    ``min(i, j) / (i * j) * sigma_x``.
    """
    if rounds < 1:
        raise DomainError("rounds must be >= 1")
    idx = np.arange(1, rounds + 1)
    inv_max = 1.0 / np.maximum.outer(idx, idx)
    return np.kron(np.ones((rounds, rounds)), model.sigma_theta) + np.kron(inv_max, model.sigma_x)


def conditional_cov(cov_aa: np.ndarray, cov_ab: np.ndarray, cov_bb: np.ndarray) -> np.ndarray:
    """Schur complement ``cov_aa - cov_ab cov_bb^{-1} cov_ba`` of a Gaussian
    block; an empty conditioning block returns ``cov_aa`` unchanged."""
    cov_aa = np.asarray(cov_aa, dtype=float)
    if cov_bb.size == 0:
        return cov_aa.copy()
    try:
        factor = linalg.cho_factor(cov_bb, lower=True)
    except linalg.LinAlgError as exc:
        raise DomainError("conditioning covariance is singular") from exc
    return symmetrize(cov_aa - cov_ab @ linalg.cho_solve(factor, cov_ab.T))


def rd_bounds(h_x: float, distortion: float, h_theta: Optional[float] = None,
              alphabet_size: Optional[int] = None) -> tuple[float, Optional[float]]:
    """Outer bounds ``H(X) - D <= R(D) <= H(theta) + log|X| - D``.

    The upper bound needs a discrete parameter and alphabet; it is returned
    as None for continuous models.
    """
    lower = h_x - distortion
    if h_theta is None or alphabet_size is None:
        return lower, None
    return lower, h_theta + math.log(alphabet_size) - distortion


@dataclass
class Inversion:
    """Result of inverting a nondecreasing rate map by bisection."""

    beta: float
    rate: float
    reached: bool
    iterations: int = field(default=0)


def invert_rate_map(rate_of_beta: Callable[[float], float], target: float,
                    lo: float = 1.0 + 1e-9, hi: float = 1e9, tol: float = 1e-8,
                    zero_beta: Optional[float] = None, max_iter: int = 400) -> Inversion:
    """Find beta with ``rate_of_beta(beta)`` within ``tol`` of ``target``.

    Bisection runs on log(beta - 1) because rates grow logarithmically in
    beta. A zero target returns ``zero_beta`` (the largest beta that still
    yields rate 0) when given. A target above ``rate_of_beta(hi)`` returns
    ``hi`` with ``reached=False``.
    """
    if target < 0:
        raise DomainError("target rate must be >= 0")
    if target == 0.0 and zero_beta is not None:
        return Inversion(zero_beta, rate_of_beta(zero_beta), True)
    r_hi = rate_of_beta(hi)
    if r_hi < target - tol:
        return Inversion(hi, r_hi, False)
    a, b = math.log(lo - 1.0), math.log(hi - 1.0)
    beta, r = hi, r_hi
    for it in range(1, max_iter + 1):
        mid = 0.5 * (a + b)
        beta = 1.0 + math.exp(mid)
        r = rate_of_beta(beta)
        if abs(r - target) <= tol:
            return Inversion(beta, r, True, it)
        if r < target:
            a = mid
        else:
            b = mid
        if b - a < 1e-15:
            break
    return Inversion(beta, r, abs(r - target) <= tol, it)
