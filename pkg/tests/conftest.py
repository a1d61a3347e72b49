import itertools
import math

import numpy as np
import pytest
from hypothesis import settings

from ibdistill.core_model import DiscreteFamily, GaussianModel

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

LOG_2PIE = math.log(2 * math.pi * math.e)


@pytest.fixture
def scalar_model():
    return GaussianModel.scalar(1.0, 1.0)


@pytest.fixture
def two_point_family():
    return DiscreteFamily.bernoulli([0.2, 0.8])


def sequence_joint(family: DiscreteFamily, k: int):
    """Exact p(x^k, x) by enumerating every length-k sequence.

    Returns (sequences, joint) with joint[s, x] = sum_theta p(theta)
    prod_i p(x_i|theta) p(x|theta). Used as an oracle independent of the
    histogram code.
    """
    m = family.alphabet_size
    seqs = list(itertools.product(range(m), repeat=k))
    joint = np.zeros((len(seqs), m))
    for s, seq in enumerate(seqs):
        for j, w in enumerate(family.prior):
            lik = family.likelihood[j]
            joint[s] += w * np.prod([lik[x] for x in seq]) * lik
    return seqs, joint


def mutual_info(joint: np.ndarray) -> float:
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def simulate_stream(model, blocks, n: int, seed: int):
    """Draw (running means, features, test point) for a fixed projection
    sequence straight from the generative model.

    Returns (means, feats, x) with means[:, l] = S_{l+1}, feats a list of
    (n, r_l) arrays and x of shape (n, d).
    """
    rng = np.random.default_rng(seed)
    d, rounds = model.d, len(blocks)
    lt = np.linalg.cholesky(model.sigma_theta)
    lx = np.linalg.cholesky(model.sigma_x)
    theta = rng.standard_normal((n, d)) @ lt.T
    xs = theta[:, None, :] + rng.standard_normal((n, rounds, d)) @ lx.T
    means = np.cumsum(xs, axis=1) / np.arange(1, rounds + 1)[None, :, None]
    feats = [means[:, l] @ np.asarray(a).T + rng.standard_normal((n, a.shape[0])) for l, a in enumerate(blocks)]
    x = theta + rng.standard_normal((n, d)) @ lx.T
    return means, feats, x


def cov_with_se(u: np.ndarray, v: np.ndarray):
    """Sample cross-covariance of centered columns and its entrywise s.e."""
    u = u - u.mean(axis=0)
    v = v - v.mean(axis=0)
    prod = u[:, :, None] * v[:, None, :]
    return prod.mean(axis=0), prod.std(axis=0) / math.sqrt(u.shape[0])


def residual_cov_with_se(target: np.ndarray, given: np.ndarray):
    """Covariance of the least-squares residual of ``target`` on ``given``,
    an empirical stand-in for the Gaussian conditional covariance."""
    if given.shape[1] == 0:
        return cov_with_se(target, target)
    g = given - given.mean(axis=0)
    t = target - target.mean(axis=0)
    coef, *_ = np.linalg.lstsq(g, t, rcond=None)
    r = t - g @ coef
    return cov_with_se(r, r)


def stream_covariance_checks(model, blocks, n: int = 10**6, seed: int = 0):
    """Yield (name, analytic, estimate, se) for every covariance the
    streaming code derives for ``blocks``."""
    from ibdistill.streaming import conditionals_given, feature_cov, sample_mean_feature_cross, x_feature_cross

    means, feats, x = simulate_stream(model, blocks, n, seed)
    rounds = len(blocks)
    all_t = np.hstack(feats)
    everything = list(range(1, rounds + 1))
    est, se = cov_with_se(all_t, all_t)
    yield "Var(T^K)", feature_cov(model, blocks, everything), est, se
    est, se = cov_with_se(x, all_t)
    yield "Cov(X,T^K)", x_feature_cross(model, blocks, everything), est, se
    for k in range(1, rounds + 1):
        est, se = cov_with_se(means[:, k - 1], all_t)
        yield f"Cov(S_{k},T^K)", sample_mean_feature_cross(model, k, blocks, everything), est, se
        for label, cond_rounds in (("past", list(range(1, k))),
                                   ("others", [j for j in everything if j != k])):
            cond, cond_x = conditionals_given(model, k, blocks, cond_rounds)
            given = np.hstack([feats[j - 1] for j in cond_rounds]) if cond_rounds else np.zeros((n, 0))
            est, se = residual_cov_with_se(means[:, k - 1], given)
            yield f"Var(S_{k}|T_{label})", cond, est, se
            est, se = residual_cov_with_se(means[:, k - 1], np.hstack([x, given]))
            yield f"Var(S_{k}|X,T_{label})", cond_x, est, se


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """record(criterion, part, ok, detail) -> ok; collected for the summary."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def _record(criterion: int, part: str, ok: bool, detail: str = "") -> bool:
        store.setdefault(criterion, []).append((part, bool(ok), detail))
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(store):
        parts = store[criterion]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}: {'ok' if ok else 'FAIL'} {info}".rstrip() for name, ok, info in parts)
        terminalreporter.write_line(f"criterion {criterion:2d} {status}  {detail}")
