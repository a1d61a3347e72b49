"""Batch rate-distortion curves for discrete sources.

The training sample enters only through its histogram, so the iterative
information bottleneck runs over the C(k+|X|-1, |X|-1) histograms instead of
the |X|^k raw sequences.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .core_model import DiscreteFamily, DomainError, Histogram, RDPoint, shannon_entropy
from .hull import convex_hull_lower

log = logging.getLogger(__name__)

MAX_HISTOGRAMS = 2_000_000
ROW_TOL = 1e-10


class SizeError(DomainError):
    """Raised when an enumeration would exceed the supported size."""


def n_histograms(alphabet_size: int, k: int) -> int:
    return math.comb(k + alphabet_size - 1, alphabet_size - 1)


def _compositions(total: int, parts: int):
    # Descending first coordinate: (k,0,..), ..., (0,..,k).
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def enumerate_histograms(alphabet_size: int, k: int) -> list[Histogram]:
    """All count vectors of length ``alphabet_size`` summing to ``k``.

    Ordered by descending counts, coordinate by coordinate, so
    ``(2, 0), (1, 1), (0, 2)`` for a binary alphabet and k=2.
    """
    if alphabet_size < 1 or k < 0:
        raise DomainError("need alphabet_size >= 1 and k >= 0")
    n = n_histograms(alphabet_size, k)
    if n > MAX_HISTOGRAMS:
        raise SizeError(f"{n} histograms exceed the limit of {MAX_HISTOGRAMS}")
    return [Histogram(c) for c in _compositions(k, alphabet_size)]


def histogram_matrix(alphabet_size: int, k: int) -> np.ndarray:
    return np.array([h.counts for h in enumerate_histograms(alphabet_size, k)], dtype=float)


@dataclass(frozen=True)
class HistogramStats:
    """Joint statistics of the histogram H_k and a fresh test point X.

    ``p_h[i]`` is p(h_i); ``p_xh[i, x]`` is p(h_i, x); ``p_x_given_h`` is
    their ratio (the prior predictive on zero-mass rows).
    """

    histograms: np.ndarray
    p_h: np.ndarray
    p_xh: np.ndarray
    p_x_given_h: np.ndarray
    p_x: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.p_h > 0

    def entropy_x(self) -> float:
        return shannon_entropy(self.p_x)

    def cond_entropy_x(self) -> float:
        """H(X | H_k) = H(X | X^k)."""
        return float(sum(ph * shannon_entropy(row) for ph, row in zip(self.p_h, self.p_x_given_h) if ph > 0))

    def mutual_info_x(self) -> float:
        """I(X; H_k) = I(X; X^k)."""
        return self.entropy_x() - self.cond_entropy_x()


def histogram_stats(family: DiscreteFamily, k: int) -> HistogramStats:
    if k < 1:
        raise DomainError("k must be >= 1")
    hist = histogram_matrix(family.alphabet_size, k)
    log_coef = gammaln(k + 1.0) - gammaln(hist + 1.0).sum(axis=1)
    # log Mult(h; k, p(.|theta)) for every (h, theta); xlogy gives 0*log 0 = 0
    log_mult = log_coef[:, None] + xlogy(hist[:, None, :], family.likelihood[None, :, :]).sum(axis=2)
    mult = np.exp(log_mult)
    weighted = mult * family.prior[None, :]
    p_h = weighted.sum(axis=1)
    p_xh = weighted @ family.likelihood
    p_x = family.predictive()
    p_x_given_h = np.tile(p_x, (hist.shape[0], 1))
    nz = p_h > 0
    p_x_given_h[nz] = p_xh[nz] / p_h[nz, None]
    return HistogramStats(hist, p_h, p_xh, p_x_given_h, p_x)


@dataclass(frozen=True)
class DiscreteIBState:
    beta: float
    encoder: np.ndarray
    marginal: np.ndarray
    decoder: np.ndarray
    iteration: int = 0
    converged: bool = False

    @property
    def t_size(self) -> int:
        return self.encoder.shape[1]


def _marginal_and_decoder(encoder: np.ndarray, stats: HistogramStats) -> tuple[np.ndarray, np.ndarray]:
    marginal = stats.p_h @ encoder
    joint_tx = encoder.T @ stats.p_xh
    decoder = np.tile(stats.p_x, (encoder.shape[1], 1))
    used = marginal > 0
    decoder[used] = joint_tx[used] / joint_tx[used].sum(axis=1, keepdims=True)
    return marginal, decoder


def state_from_encoder(encoder: np.ndarray, stats: HistogramStats, beta: float, iteration: int = 0) -> DiscreteIBState:
    encoder = np.array(encoder, dtype=float)
    encoder[~stats.support] = 1.0 / encoder.shape[1]
    marginal, decoder = _marginal_and_decoder(encoder, stats)
    return DiscreteIBState(beta, encoder, marginal, decoder, iteration)


def information_terms(encoder: np.ndarray, stats: HistogramStats) -> tuple[float, float]:
    """Exact (I(H_k; T), I(X; T)) for an encoder q(t|h)."""
    p_ht = stats.p_h[:, None] * encoder
    q_t = p_ht.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p_ht > 0, encoder / q_t[None, :], 1.0)
        rate = float(np.sum(xlogy(p_ht, ratio)))
        p_xt = encoder.T @ stats.p_xh
        denom = q_t[:, None] * stats.p_x[None, :]
        relevance = float(np.sum(xlogy(p_xt, np.where(p_xt > 0, p_xt / denom, 1.0))))
    return max(rate, 0.0), max(relevance, 0.0)


def ib_lagrangian(encoder: np.ndarray, stats: HistogramStats, beta: float) -> float:
    rate, relevance = information_terms(encoder, stats)
    return rate - beta * relevance


def _kl_matrix(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p_i || q_t) for all row pairs; +inf where q misses p's support."""
    logq = np.log(np.where(q > 0, q, 1.0))
    cross = p @ logq.T
    neg_ent = np.sum(xlogy(p, p), axis=1)
    kl = neg_ent[:, None] - cross
    missing = ((p > 0).astype(float) @ (q <= 0).astype(float).T) > 0
    kl[missing] = np.inf
    return np.maximum(kl, 0.0)


def ib_update_step(state: DiscreteIBState, stats: HistogramStats) -> DiscreteIBState:
    """One pass of the three self-consistent updates: encoder from the
    current (marginal, decoder), then marginal and decoder from the new
    encoder, with sums running over histograms weighted by p(h)."""
    beta = state.beta
    kl = _kl_matrix(stats.p_x_given_h, state.decoder)
    with np.errstate(divide="ignore"):
        log_qt = np.log(state.marginal)
    logits = np.broadcast_to(log_qt, kl.shape).copy()
    if beta > 0:
        logits = logits - beta * kl
    log_z = logsumexp(logits, axis=1, keepdims=True)
    dead = ~np.isfinite(log_z[:, 0])
    encoder = np.exp(logits - np.where(np.isfinite(log_z), log_z, 0.0))
    t_size = encoder.shape[1]
    if np.any(dead & stats.support):
        log.warning("encoder underflow in %d rows at beta=%g; rows reset to uniform",
                    int(np.sum(dead & stats.support)), beta)
    encoder[dead] = 1.0 / t_size
    encoder[~stats.support] = 1.0 / t_size
    encoder /= encoder.sum(axis=1, keepdims=True)
    marginal, decoder = _marginal_and_decoder(encoder, stats)
    return DiscreteIBState(beta, encoder, marginal, decoder, state.iteration + 1)


def random_encoder(n_rows: int, t_size: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(t_size), size=n_rows)


def _rd_point(state: DiscreteIBState, stats: HistogramStats) -> RDPoint:
    rate, relevance = information_terms(state.encoder, stats)
    # clusters with (numerically) equal decoders act as one
    used = state.decoder[state.marginal > 1e-12]
    n_active = int(np.unique(np.round(used, 6), axis=0).shape[0])
    return RDPoint(state.beta, rate, stats.entropy_x() - relevance, n_active, state.converged)


def solve_discrete_ib(family: DiscreteFamily, k: int, beta: float, t_size: int, seed=0,
                      tol: float = 1e-9, max_iter: int = 10000,
                      stats: Optional[HistogramStats] = None) -> tuple[DiscreteIBState, RDPoint]:
    """Iterate :func:`ib_update_step` from a seeded Dirichlet(1) encoder.

    Stops when the largest L1 change of an encoder row falls below ``tol``.
    On hitting ``max_iter`` the lowest-Lagrangian iterate is returned with
    ``converged=False``.
    """
    if t_size < 1:
        raise DomainError("t_size must be >= 1")
    if beta < 0:
        raise DomainError("beta must be >= 0")
    stats = stats if stats is not None else histogram_stats(family, k)
    state = state_from_encoder(random_encoder(stats.p_h.size, t_size, seed), stats, beta)
    support = stats.support
    best, best_loss = state, ib_lagrangian(state.encoder, stats, beta)
    for _ in range(max_iter):
        new = ib_update_step(state, stats)
        change = np.max(np.abs(new.encoder[support] - state.encoder[support]).sum(axis=1), initial=0.0)
        state = new
        loss = ib_lagrangian(state.encoder, stats, beta)
        if loss <= best_loss:
            best, best_loss = state, loss
        if change < tol:
            state = replace(state, converged=True)
            return state, _rd_point(state, stats)
    log.info("discrete IB did not converge at beta=%g within %d iterations", beta, max_iter)
    return best, _rd_point(best, stats)


def rd_curve_discrete(family: DiscreteFamily, k: int, beta_grid: Sequence[float], t_size: int,
                      seed: int = 0, restarts: int = 1, hull: bool = False,
                      tol: float = 1e-9, max_iter: int = 10000) -> list[RDPoint]:
    """Best-of-``restarts`` solution per beta, sorted by rate.

    Restart ``r`` is seeded with ``seed + r`` so adding restarts only ever
    adds candidates.
    """
    betas = list(beta_grid)
    if not betas:
        raise DomainError("beta_grid is empty")
    if any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
        raise DomainError("beta_grid must be ascending")
    stats = histogram_stats(family, k)
    points = []
    for beta in betas:
        best_pt, best_loss = None, math.inf
        for r in range(max(1, restarts)):
            state, pt = solve_discrete_ib(family, k, beta, t_size, seed + r, tol, max_iter, stats)
            loss = ib_lagrangian(state.encoder, stats, beta)
            if loss < best_loss:
                best_pt, best_loss = pt, loss
        points.append(best_pt)
    points.sort(key=lambda p: (p.rate, p.distortion))
    if hull:
        keep = convex_hull_lower([(p.rate, p.distortion) for p in points], indices=True)
        points = [points[i] for i in keep]
    return points


# -- brute-force oracle --------------------------------------------------------

ORACLE_STEP = 0.05
ORACLE_MAX_ENCODERS = 20_000_000


def _simplex_grid(t_size: int, step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.array([c for c in _compositions(n, t_size)], dtype=float) / n


def _oracle_table(family: DiscreteFamily, k: int, t_size: int, step: float = ORACLE_STEP):
    stats = histogram_stats(family, k)
    n_h = stats.p_h.size
    if n_h > 6 or t_size > 3:
        raise SizeError("oracle supports at most 6 histograms and |T| <= 3")
    rows = _simplex_grid(t_size, step)
    total = rows.shape[0] ** n_h
    if total > ORACLE_MAX_ENCODERS:
        raise SizeError(f"{total} encoders exceed the oracle limit of {ORACLE_MAX_ENCODERS}")
    return stats, rows


def _oracle_batches(stats: HistogramStats, rows: np.ndarray, batch: int = 200_000):
    """Yield (index tuples, rate, relevance) over the full encoder grid."""
    n_h = stats.p_h.size
    n_rows = rows.shape[0]
    total = n_rows ** n_h
    p_h, p_xh, p_x = stats.p_h, stats.p_xh, stats.p_x
    for start in range(0, total, batch):
        flat = np.arange(start, min(total, start + batch))
        idx = np.array(np.unravel_index(flat, (n_rows,) * n_h)).T
        enc = rows[idx]  # (B, n_h, T)
        p_ht = p_h[None, :, None] * enc
        q_t = p_ht.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.sum(xlogy(p_ht, np.where(p_ht > 0, enc / q_t[:, None, :], 1.0)), axis=(1, 2))
            p_xt = np.einsum("bht,hx->btx", enc, p_xh)
            denom = q_t[:, :, None] * p_x[None, None, :]
            rel = np.sum(xlogy(p_xt, np.where(p_xt > 0, p_xt / denom, 1.0)), axis=(1, 2))
        yield idx, np.maximum(rate, 0.0), np.maximum(rel, 0.0)


def brute_force_rd_oracle(family: DiscreteFamily, k: int, t_size: int,
                          rate_budget_grid: Sequence[float], step: float = ORACLE_STEP) -> list[RDPoint]:
    """Lower envelope of (I(H;T), H(X|T)) over all encoders whose rows lie
    on the ``step`` simplex grid; one point per rate budget."""
    stats, rows = _oracle_table(family, k, t_size, step)
    budgets = np.asarray(sorted(rate_budget_grid), dtype=float)
    best_rel = np.full(budgets.size, -np.inf)
    best_rate = np.zeros(budgets.size)
    for _, rate, rel in _oracle_batches(stats, rows):
        for j, b in enumerate(budgets):
            ok = rate <= b + 1e-12
            if np.any(ok):
                i = int(np.argmax(np.where(ok, rel, -np.inf)))
                if rel[i] > best_rel[j]:
                    best_rel[j], best_rate[j] = rel[i], rate[i]
    h_x = stats.entropy_x()
    return [RDPoint(math.nan, float(r), h_x - float(v), 0) for r, v in zip(best_rate, best_rel)]


def brute_force_lagrangian(family: DiscreteFamily, k: int, t_size: int, beta: float,
                           step: float = ORACLE_STEP) -> tuple[float, float]:
    """Grid minimum of I(H;T) - beta I(X;T) and its resolution slack.

    The slack is the largest Lagrangian change between the grid minimizer and
    any encoder one grid step away (``step`` of mass moved between two cells
    of a single row).
    """
    stats, rows = _oracle_table(family, k, t_size, step)
    best, best_idx = math.inf, None
    for idx, rate, rel in _oracle_batches(stats, rows):
        loss = rate - beta * rel
        i = int(np.argmin(loss))
        if loss[i] < best:
            best, best_idx = float(loss[i]), idx[i].copy()
    base = rows[best_idx]
    spread = 0.0
    for h in range(base.shape[0]):
        for a, b in itertools.permutations(range(base.shape[1]), 2):
            if base[h, a] < step - 1e-12:
                continue
            enc = base.copy()
            enc[h, a] -= step
            enc[h, b] += step
            spread = max(spread, abs(ib_lagrangian(enc, stats, beta) - best))
    return best, spread
