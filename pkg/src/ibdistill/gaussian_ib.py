"""Batch Gaussian information bottleneck on the sample-mean statistic.

The encoder is ``T = A S_k + Z`` with ``S_k`` the mean of k draws. Its rows
are scaled left eigenvectors of ``Sigma_{S|X} Sigma_S^{-1}``; the left
eigenvectors of that product are exactly the generalized eigenvectors of the
symmetric-definite pencil ``(Sigma_{S|X}, Sigma_S)``, which is how they are
computed here.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core_model import (
    DomainError,
    GaussianModel,
    RDPoint,
    check_spd,
    conditional_cov,
    gaussian_entropy,
    logdet_spd,
    symmetrize,
)

log = logging.getLogger(__name__)

EIG_TOL = 1e-9
# a component exactly at its critical beta carries zero rate; this margin
# keeps eigenvalue round-off from switching it on
CRIT_RTOL = 1e-12


@dataclass(frozen=True)
class Eigensystem:
    """Ascending eigenvalues of ``cond @ inv(base)`` with unit-norm left
    eigenvectors stored as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def critical_betas(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.eigenvalues < 1.0, 1.0 / (1.0 - self.eigenvalues), np.inf)

    def n_active(self, beta: float) -> int:
        return int(np.sum(self.critical_betas * (1.0 + CRIT_RTOL) < beta))


def ib_eigensystem(cond: np.ndarray, base: np.ndarray) -> Eigensystem:
    """Solve ``cond v = lam base v`` for a PSD ``cond`` and PD ``base``.

    Eigenvalues are clipped to [0, 1] after checking they lie there within
    1e-9; eigenvectors are normalized to unit length with their first
    nonzero coordinate positive.
    """
    base = check_spd(base, "base covariance")
    lam, vecs = linalg.eigh(symmetrize(cond), base)
    if lam.size and (lam[0] < -EIG_TOL or lam[-1] > 1.0 + EIG_TOL):
        raise DomainError(f"bottleneck eigenvalues outside [0, 1]: {lam}")
    lam = np.clip(lam, 0.0, 1.0)
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-14)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return Eigensystem(lam, vecs)


def projection_rows(eig: Eigensystem, base: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``alpha_i v_i^T`` for every component with critical beta below
    ``beta``; returns (A, alphas)."""
    n = eig.n_active(beta)
    d = eig.eigenvectors.shape[0]
    if n == 0:
        return np.zeros((0, d)), np.zeros(0)
    lam = eig.eigenvalues[:n]
    v = eig.eigenvectors[:, :n]
    numer = beta * (1.0 - lam) - 1.0
    assert np.all(numer >= 0), "retained component with beta below its critical value"
    quad = np.einsum("ij,ik,kj->j", v, base, v)
    alphas = np.sqrt(numer / (lam * quad))
    return (alphas[:, None] * v.T), alphas


def parametric_rd(eigenvalues: np.ndarray, beta: float, h_x: float) -> tuple[float, float, int]:
    """(rate, distortion, n) from the eigenvalue sums; both in nats.

    ``h_x`` is the entropy the distortion starts from at zero rate.
    """
    lam = np.asarray(eigenvalues)
    with np.errstate(divide="ignore"):
        crit = np.where(lam < 1.0, 1.0 / (1.0 - lam), np.inf)
    active = lam[crit * (1.0 + CRIT_RTOL) < beta]
    if active.size == 0 or beta <= 1.0:
        return 0.0, h_x, 0
    rate = 0.5 * float(np.sum(np.log((beta - 1.0) * (1.0 - active) / active)))
    dist = 0.5 * float(np.sum(np.log(active * beta / (beta - 1.0)))) + h_x
    return rate, dist, int(active.size)


@dataclass(frozen=True)
class GIBSolution:
    a_matrix: np.ndarray
    sigma_z: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    critical_betas: np.ndarray
    beta: float
    n_active: int
    alphas: np.ndarray = None


@dataclass(frozen=True)
class BottleneckMatrix:
    k_matrix: np.ndarray
    sigma_s: np.ndarray
    eig: Eigensystem

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eig.eigenvalues

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.eig.eigenvectors


def batch_bottleneck_matrix(model: GaussianModel, k: int) -> BottleneckMatrix:
    """Conditional covariance of the k-sample mean given a test point, and
    the eigensystem of its normalization by the sample-mean covariance."""
    if k < 1:
        raise DomainError("k must be >= 1")
    sx, st = model.sigma_x, model.sigma_theta
    marg = model.sigma_marginal
    k_matrix = (sx + st) / k + (k - 1) / k * st - st @ np.linalg.solve(marg, st)
    k_matrix = symmetrize(k_matrix)
    sigma_s = model.sample_mean_cov(k)
    direct = conditional_cov(sigma_s, st, marg)
    if np.max(np.abs(direct - k_matrix)) > 1e-10 * max(1.0, np.max(np.abs(sigma_s))):
        raise DomainError("bottleneck matrix disagrees with the conditional covariance")
    return BottleneckMatrix(k_matrix, sigma_s, ib_eigensystem(k_matrix, sigma_s))


def closed_form_rd(model: GaussianModel, k: int, beta: float) -> tuple[RDPoint, GIBSolution]:
    if beta <= 0:
        raise DomainError("beta must be > 0")
    bm = batch_bottleneck_matrix(model, k)
    h_x = gaussian_entropy(model.sigma_marginal)
    rate, dist, n = parametric_rd(bm.eigenvalues, beta, h_x)
    if n == 0:
        a, alphas = np.zeros((0, model.d)), np.zeros(0)
    else:
        a, alphas = projection_rows(bm.eig, bm.sigma_s, beta)
    sol = GIBSolution(a, np.eye(a.shape[0]), bm.eigenvalues, bm.eigenvectors,
                      bm.eig.critical_betas, beta, n, alphas)
    return RDPoint(beta, rate, dist, n), sol


def distortion_from_projection(model: GaussianModel, k: int, a_matrix: np.ndarray,
                               sigma_z: np.ndarray) -> float:
    """h(X | T) for ``T = A S_k + Z`` by conditioning the joint Gaussian."""
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    if a.size == 0:
        return gaussian_entropy(model.sigma_marginal)
    if a.shape[1] != model.d:
        raise DomainError(f"projection has {a.shape[1]} columns, model has d={model.d}")
    sz = check_spd(sigma_z, "sigma_z")
    var_t = symmetrize(a @ model.sample_mean_cov(k) @ a.T + sz)
    try:
        check_spd(var_t, "Var(T)")
    except DomainError as exc:
        raise DomainError("Var(T) is singular") from exc
    cov_xt = model.sigma_theta @ a.T
    return gaussian_entropy(conditional_cov(model.sigma_marginal, cov_xt, var_t))


def projection_rate(model: GaussianModel, k: int, a_matrix: np.ndarray, sigma_z: np.ndarray) -> float:
    """I(S_k; T) for ``T = A S_k + Z``."""
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    if a.size == 0:
        return 0.0
    var_t = symmetrize(a @ model.sample_mean_cov(k) @ a.T + sigma_z)
    return 0.5 * (logdet_spd(var_t) - logdet_spd(sigma_z))


def iterative_gib(model: GaussianModel, k: int, beta: float, seed: int = 0,
                  tol: float = 1e-10, max_iter: int = 100_000,
                  max_damping: int = 20) -> tuple[GIBSolution, RDPoint]:
    """Fixed-point iteration for the Gaussian bottleneck.

    Each pass recomputes ``Sigma_t = A Sigma_S A^T + Sigma_Z`` and
    ``Sigma_{t|x} = A Sigma_{S|X} A^T + Sigma_Z`` exactly, then sets::

        Sigma_Z <- (beta Sigma_{t|x}^{-1} - (beta - 1) Sigma_t^{-1})^{-1}
        A       <- beta Sigma_Z Sigma_{t|x}^{-1} A (I - Sigma_{S|X} Sigma_S^{-1})

    Stops when the max-abs change in A drops below ``tol``.
    """
    if beta <= 1:
        raise DomainError("iterative GIB needs beta > 1")
    d = model.d
    bm = batch_bottleneck_matrix(model, k)
    sigma_s, cond = bm.sigma_s, bm.k_matrix
    shrink = np.eye(d) - cond @ np.linalg.inv(sigma_s)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    sz = np.eye(d)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        var_t = symmetrize(a @ sigma_s @ a.T + sz)
        var_tx = symmetrize(a @ cond @ a.T + sz)
        inv_tx = np.linalg.inv(var_tx)
        precision = symmetrize(beta * inv_tx - (beta - 1.0) * np.linalg.inv(var_t))
        new_sz = None
        cand = precision
        for _ in range(max_damping + 1):
            try:
                new_sz = symmetrize(np.linalg.inv(check_spd(cand)))
                break
            except DomainError:
                cand = 0.5 * (cand + np.linalg.inv(sz))
        if new_sz is None:
            log.warning("noise covariance update not PD after %d damping steps", max_damping)
            break
        new_a = beta * new_sz @ inv_tx @ a @ shrink
        delta = float(np.max(np.abs(new_a - a)))
        a, sz = new_a, new_sz
        if delta < tol:
            converged = True
            break
    rate = projection_rate(model, k, a, sz)
    dist = distortion_from_projection(model, k, a, sz)
    n = bm.eig.n_active(beta)
    sol = GIBSolution(a, sz, bm.eigenvalues, bm.eigenvectors, bm.eig.critical_betas, beta, n)
    return sol, RDPoint(beta, rate, dist, n, converged)


def rd_curve_gaussian(model: GaussianModel, k: int, beta_grid) -> list[RDPoint]:
    betas = list(beta_grid)
    if any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
        raise DomainError("beta_grid must be ascending")
    bm = batch_bottleneck_matrix(model, k)
    h_x = gaussian_entropy(model.sigma_marginal)
    out = []
    for beta in betas:
        rate, dist, n = parametric_rd(bm.eigenvalues, beta, h_x)
        out.append(RDPoint(beta, rate, dist, n))
    return out
