"""Sequential Gaussian compression: online, two-pass and comprehensive.

Round ``l`` sees the first ``l`` samples and emits ``T_l = A_l S_l + Z_l``
with ``S_l`` the running sample mean and ``Z_l ~ N(0, I)``. Every covariance
needed here follows from the joint law of the running means,
``Cov(S_i, S_j) = Sigma_theta + Sigma_x / max(i, j)`` and
``Cov(X, S_i) = Sigma_theta``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import optimize

from .core_model import (
    DomainError,
    GaussianModel,
    Inversion,
    conditional_cov,
    entropy_triple,
    gaussian_entropy,
    invert_rate_map,
    logdet_spd,
    symmetrize,
)
from .gaussian_ib import Eigensystem, ib_eigensystem, parametric_rd, projection_rows
from .hull import convex_hull_lower

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateBudget:
    """Per-round rate target in nats; a scalar applies to every round."""

    nats: Union[float, tuple]

    def for_round(self, k: int) -> float:
        if isinstance(self.nats, (int, float)):
            return float(self.nats)
        return float(self.nats[k - 1])


BetaPolicy = Union[float, Sequence[float], RateBudget]


@dataclass(frozen=True)
class RoundSolution:
    round: int
    beta: float
    a_k: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    critical_betas: np.ndarray
    alphas: np.ndarray
    rate: float
    distortion: float
    cond_cov: np.ndarray
    cond_cov_x: np.ndarray

    @property
    def n_active(self) -> int:
        return self.a_k.shape[0]


@dataclass
class StreamState:
    """Projections chosen so far plus per-round accounting.

    ``rates[l-1]`` is ``I(S_l; T_l | T_1..T_{l-1})`` and ``distortions[l-1]``
    is ``h(X | T_1..T_l)``, both in nats.
    """

    model: GaussianModel
    blocks: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    distortions: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    saturated: list = field(default_factory=list)

    @property
    def round(self) -> int:
        return len(self.blocks)

    @property
    def joint_feature_cov(self) -> np.ndarray:
        return feature_cov(self.model, self.blocks, range(1, self.round + 1))

    @property
    def cross_cov(self) -> np.ndarray:
        """Cov(S_l, T_1..T_{l-1}) for the latest round l."""
        return sample_mean_feature_cross(self.model, self.round, self.blocks, range(1, self.round))

    @property
    def global_projection(self) -> np.ndarray:
        """Block-diagonal diag(A_1, ..., A_l) acting on (S_1, ..., S_l)."""
        d = self.model.d
        rows = sum(b.shape[0] for b in self.blocks)
        out = np.zeros((rows, d * self.round))
        r = 0
        for j, b in enumerate(self.blocks):
            out[r:r + b.shape[0], j * d:(j + 1) * d] = b
            r += b.shape[0]
        return out


class _Features:
    """Stacked projection diag(A_j : j in rounds) with the covariances of the
    features it emits."""

    def __init__(self, model: GaussianModel, blocks, rounds):
        self.model = model
        self.rounds = list(rounds)
        d = model.d
        mats = [np.reshape(blocks[j - 1], (-1, d)) for j in self.rounds]
        a = np.zeros((sum(m.shape[0] for m in mats), d * len(mats)))
        r = 0
        for i, m in enumerate(mats):
            a[r:r + m.shape[0], i * d:(i + 1) * d] = m
            r += m.shape[0]
        self.a = a

    @property
    def size(self) -> int:
        return self.a.shape[0]

    def _tile_theta(self, n_rows: int) -> np.ndarray:
        return np.kron(np.ones((n_rows, len(self.rounds))), self.model.sigma_theta)

    def cov(self) -> np.ndarray:
        if self.size == 0:
            return np.zeros((0, 0))
        r = np.asarray(self.rounds, dtype=float)
        c = self._tile_theta(len(r)) + np.kron(1.0 / np.maximum.outer(r, r), self.model.sigma_x)
        return symmetrize(self.a @ c @ self.a.T) + np.eye(self.size)

    def cross_mean(self, k: int) -> np.ndarray:
        if self.size == 0:
            return np.zeros((self.model.d, 0))
        inv = 1.0 / np.maximum(k, np.asarray(self.rounds, dtype=float))
        return (self._tile_theta(1) + np.kron(inv[None, :], self.model.sigma_x)) @ self.a.T

    def cross_x(self) -> np.ndarray:
        if self.size == 0:
            return np.zeros((self.model.d, 0))
        return self._tile_theta(1) @ self.a.T


def feature_cov(model: GaussianModel, blocks, rounds) -> np.ndarray:
    """Joint covariance of the stacked features T_j, j in ``rounds``."""
    return _Features(model, blocks, rounds).cov()


def sample_mean_feature_cross(model: GaussianModel, k: int, blocks, rounds) -> np.ndarray:
    """Cov(S_k, T_j) blocks side by side for j in ``rounds``."""
    return _Features(model, blocks, rounds).cross_mean(k)


def x_feature_cross(model: GaussianModel, blocks, rounds) -> np.ndarray:
    """Cov(X, T_j) blocks side by side for j in ``rounds``."""
    return _Features(model, blocks, rounds).cross_x()


def conditionals_given(model: GaussianModel, k: int, blocks, rounds) -> tuple[np.ndarray, np.ndarray]:
    """(Sigma_{S_k | T_R}, Sigma_{S_k | X, T_R}) for the feature set R."""
    f = _Features(model, blocks, rounds)
    sigma_s = model.sample_mean_cov(k)
    cross = f.cross_mean(k)
    var_t = f.cov()
    cond = conditional_cov(sigma_s, cross, var_t)
    cross_xt = f.cross_x()
    joint = np.block([[model.sigma_marginal, cross_xt], [cross_xt.T, var_t]])
    stacked = np.hstack([model.sigma_theta, cross])
    cond_x = conditional_cov(sigma_s, stacked, joint)
    return cond, cond_x


def conditional_covariances(model: GaussianModel, k: int, state: StreamState) -> tuple[np.ndarray, np.ndarray]:
    """Round-k conditionals given the features of rounds 1..k-1 in ``state``."""
    if state.round < k - 1:
        raise DomainError(f"state holds {state.round} rounds, round {k} needs {k - 1}")
    return conditionals_given(model, k, state.blocks, range(1, k))


def distortion_given(model: GaussianModel, blocks, rounds) -> float:
    """h(X | T_R)."""
    f = _Features(model, blocks, rounds)
    if f.size == 0:
        return gaussian_entropy(model.sigma_marginal)
    return gaussian_entropy(conditional_cov(model.sigma_marginal, f.cross_x(), f.cov()))


def _round_rate(a_k: np.ndarray, cond: np.ndarray) -> float:
    if a_k.shape[0] == 0:
        return 0.0
    return 0.5 * logdet_spd(symmetrize(a_k @ cond @ a_k.T + np.eye(a_k.shape[0])))


def _solve_round(model, k, blocks, rounds, beta, pre=None) -> RoundSolution:
    cond, cond_x, eig = pre if pre is not None else _round_problem(model, k, blocks, rounds)
    a_k, alphas = projection_rows(eig, cond, beta)
    trial = list(blocks[:k - 1]) + [a_k] + list(blocks[k:])
    dist = distortion_given(model, trial, sorted(set(rounds) | {k}))
    return RoundSolution(k, beta, a_k, eig.eigenvalues, eig.eigenvectors, eig.critical_betas,
                         alphas, _round_rate(a_k, cond), dist, cond, cond_x)


def online_round(model: GaussianModel, k: int, state: StreamState, beta: float) -> RoundSolution:
    """Optimal round-k projection given the features of rounds 1..k-1."""
    if beta <= 0:
        raise DomainError("beta must be > 0")
    if state.round < k - 1:
        raise DomainError(f"state holds {state.round} rounds, round {k} needs {k - 1}")
    return _solve_round(model, k, state.blocks[:k - 1], range(1, k), beta)


def _round_problem(model, k, blocks, rounds) -> tuple[np.ndarray, np.ndarray, Eigensystem]:
    cond, cond_x = conditionals_given(model, k, blocks, rounds)
    return cond, cond_x, ib_eigensystem(cond_x, cond)


def _invert_round(eig: Eigensystem, target: float, tol: float) -> Inversion:
    crit = eig.critical_betas
    zero_beta = float(min(np.min(crit), 1e9)) if crit.size else 1e9
    return invert_rate_map(lambda b: parametric_rd(eig.eigenvalues, b, 0.0)[0], target,
                           tol=tol, zero_beta=zero_beta)


def beta_for_round_rate(model: GaussianModel, k: int, state: StreamState, target_rate: float,
                        tol: float = 1e-8) -> Inversion:
    """Beta whose round-k online solution spends ``target_rate`` nats.

    ``reached`` is False when even beta = 1e9 falls short of the target.
    """
    _, _, eig = _round_problem(model, k, state.blocks[:k - 1], range(1, k))
    return _invert_round(eig, target_rate, tol)


def _policy_beta(policy: BetaPolicy, k: int) -> Optional[float]:
    if isinstance(policy, RateBudget):
        return None
    if isinstance(policy, (int, float)):
        return float(policy)
    return float(policy[k - 1])


def _append(state: StreamState, sol: RoundSolution, saturated: bool = False) -> None:
    state.blocks.append(sol.a_k)
    state.betas.append(sol.beta)
    state.rates.append(sol.rate)
    state.distortions.append(sol.distortion)
    state.solutions.append(sol)
    state.saturated.append(saturated)


def run_online(model: GaussianModel, rounds: int, beta_policy: BetaPolicy) -> StreamState:
    """Greedy round-by-round solution; each round conditions on all earlier
    features only."""
    if rounds < 1:
        raise DomainError("rounds must be >= 1")
    state = StreamState(model)
    for k in range(1, rounds + 1):
        beta = _policy_beta(beta_policy, k)
        if beta is not None:
            _append(state, online_round(model, k, state, beta))
            continue
        pre = _round_problem(model, k, state.blocks, range(1, k))
        inv = _invert_round(pre[2], beta_policy.for_round(k), 1e-8)
        _append(state, _solve_round(model, k, state.blocks, range(1, k), inv.beta, pre), not inv.reached)
    return state


def _refresh_accounting(state: StreamState) -> None:
    model, blocks = state.model, state.blocks
    rates, dists = [], []
    for l in range(1, state.round + 1):
        cond, _ = conditionals_given(model, l, blocks, range(1, l))
        rates.append(_round_rate(blocks[l - 1], cond))
        dists.append(distortion_given(model, blocks, range(1, l + 1)))
    state.rates, state.distortions = rates, dists


def run_twopass(model: GaussianModel, rounds: int, beta_policy: BetaPolicy, passes: int = 1) -> StreamState:
    """Online forward pass, then ``passes`` backward sweeps.

    A backward step re-solves round k's bottleneck conditioned on the
    features of every other round and swaps in the new projection. The first
    sweep runs k = K-1..1 (round K already conditions on everything else);
    later sweeps run k = K..1. Each round keeps the beta the forward pass
    assigned to it.
    """
    if rounds < 2:
        raise DomainError("two-pass needs rounds >= 2")
    if passes < 1:
        raise DomainError("passes must be >= 1")
    state = run_online(model, rounds, beta_policy)
    for sweep in range(passes):
        start = rounds - 1 if sweep == 0 else rounds
        for k in range(start, 0, -1):
            others = [j for j in range(1, rounds + 1) if j != k]
            sol = _solve_round(model, k, state.blocks, others, state.betas[k - 1])
            state.blocks[k - 1] = sol.a_k
            state.solutions[k - 1] = sol
    _refresh_accounting(state)
    return state


def total_accounting(state: StreamState) -> tuple[float, float]:
    """(total rate, sum regret) = (sum of round rates, sum of h(X | T^l))."""
    return float(sum(state.rates)), float(sum(state.distortions))


def relevant_information(state: StreamState) -> float:
    """I(X; T_1..T_K) = sum over rounds of I(X; T_l | T^{l-1})."""
    h_x = gaussian_entropy(state.model.sigma_marginal)
    return h_x - (state.distortions[-1] if state.distortions else h_x)


def stream_loss(state: StreamState, beta: float) -> float:
    """Total rate minus beta times total relevant information."""
    return float(sum(state.rates)) - beta * relevant_information(state)


# -- comprehensive (joint) solution, scalar K=2 -------------------------------

@dataclass(frozen=True)
class ComprehensiveConfig:
    n_starts: int = 32
    max_evals: int = 2000
    seed: int = 0
    xatol: float = 1e-9
    fatol: float = 1e-12


@dataclass
class ComprehensiveResult:
    """Raw optimizer outcomes per trade-off weight plus their lower hull."""

    weights: list
    points: list  # (total_rate, total_distortion) per weight
    params: list
    flags: list  # True where the best start hit its evaluation budget
    hull: list

    @property
    def all_converged(self) -> bool:
        return not any(self.flags)


class _ScalarTwoRound:
    """Closed-form totals for T_1 = a S_1 + Z_1, T_2 = b1 S_1 + b2 S_2 + Z_2."""

    def __init__(self, model: GaussianModel):
        if model.d != 1:
            raise DomainError("comprehensive solution is implemented for d = 1")
        sx = float(model.sigma_x[0, 0])
        st = float(model.sigma_theta[0, 0])
        self.vx = sx + st
        self.st = st
        self.v11 = st + sx
        self.v12 = st + sx / 2.0
        self.v22 = st + sx / 2.0
        self.c = 0.5 * math.log(2.0 * math.pi * math.e)

    def totals(self, params) -> tuple[float, float]:
        a, b1, b2 = (float(p) for p in params)
        vt1 = a * a * self.v11 + 1.0
        c12 = a * (b1 * self.v11 + b2 * self.v12)
        vt2 = b1 * b1 * self.v11 + 2.0 * b1 * b2 * self.v12 + b2 * b2 * self.v22 + 1.0
        vt2_1 = vt2 - c12 * c12 / vt1
        rate = 0.5 * math.log(vt1) + 0.5 * math.log(vt2_1)
        cx1 = a * self.st
        cx2 = (b1 + b2) * self.st
        var1 = self.vx - cx1 * cx1 / vt1
        det = vt1 * vt2 - c12 * c12
        quad = (cx1 * cx1 * vt2 - 2.0 * cx1 * cx2 * c12 + cx2 * cx2 * vt1) / det
        var2 = self.vx - quad
        dist = 2.0 * self.c + 0.5 * math.log(var1) + 0.5 * math.log(var2)
        return rate, dist


def comprehensive_k2_scalar(model: GaussianModel, weights: Sequence[float],
                            config: ComprehensiveConfig = ComprehensiveConfig()) -> ComprehensiveResult:
    """Jointly optimize both rounds' encoders for every trade-off weight.

    For weight w the objective is total_rate + w * total_distortion. Round 2
    may use both sample means it has seen. Each weight is solved by
    Nelder-Mead from ``n_starts`` seeded starting points; the reported curve
    is the lower convex hull of the per-weight optima.
    """
    fn = _ScalarTwoRound(model)
    rng = np.random.default_rng(config.seed)
    scales = 10.0 ** rng.uniform(-1.0, 1.5, size=config.n_starts)
    starts = rng.standard_normal((config.n_starts, 3)) * scales[:, None]
    out_pts, out_params, flags = [], [], []
    for w in weights:
        def objective(p, w=w):
            r, dd = fn.totals(p)
            return r + w * dd

        best = None
        for x0 in starts:
            res = optimize.minimize(objective, x0, method="Nelder-Mead",
                                    options={"maxfev": config.max_evals, "xatol": config.xatol,
                                             "fatol": config.fatol})
            if best is None or res.fun < best.fun:
                best = res
        stalled = best.nfev >= config.max_evals and not best.success
        if stalled:
            log.info("comprehensive optimizer hit the evaluation cap at weight %g", w)
        out_pts.append(fn.totals(best.x))
        out_params.append(tuple(float(v) for v in best.x))
        flags.append(bool(stalled))
    hull = convex_hull_lower([(0.0, 2.0 * gaussian_entropy(model.sigma_marginal))] + out_pts)
    return ComprehensiveResult(list(weights), out_pts, out_params, flags, hull)


def comprehensive_limits(model: GaussianModel) -> tuple[float, float]:
    """(zero-rate total distortion, infinite-rate total distortion) for K=2."""
    h_x = gaussian_entropy(model.sigma_marginal)
    return 2.0 * h_x, entropy_triple(model, 1)[1] + entropy_triple(model, 2)[1]


def beta_for_total_rate(model: GaussianModel, rounds: int, target: float, passes: int = 0,
                        tol: float = 1e-9) -> tuple[Inversion, StreamState]:
    """Fixed beta whose online (``passes=0``) or two-pass run spends
    ``target`` nats in total; returns the inversion and the matching run."""

    def run(beta: float) -> StreamState:
        if passes == 0:
            return run_online(model, rounds, beta)
        return run_twopass(model, rounds, beta, passes)

    inv = invert_rate_map(lambda b: sum(run(b).rates), target, tol=tol, zero_beta=1.0 + 1e-9)
    return inv, run(inv.beta)
