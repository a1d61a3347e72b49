import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ibdistill.core_model import DomainError, GaussianModel, entropy_triple, gaussian_entropy
from ibdistill.gaussian_ib import closed_form_rd, ib_eigensystem
from ibdistill.streaming import (
    _refresh_accounting,
    RateBudget,
    StreamState,
    beta_for_round_rate,
    comprehensive_k2_scalar,
    comprehensive_limits,
    conditional_covariances,
    conditionals_given,
    distortion_given,
    feature_cov,
    online_round,
    run_online,
    run_twopass,
    sample_mean_feature_cross,
    stream_loss,
    total_accounting,
    x_feature_cross,
)

from conftest import simulate_stream, stream_covariance_checks


def _state(model, blocks):
    s = StreamState(model)
    s.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    return s


def _primitive_covariances(model, blocks):
    """Exact covariances by writing every variable as a linear map of the
    independent primitives (theta, noise_1..noise_K, test noise, Z_1..Z_K)."""
    d, rounds = model.d, len(blocks)
    r_sizes = [b.shape[0] for b in blocks]
    n_prim = d * (rounds + 2) + sum(r_sizes)
    lt = np.linalg.cholesky(model.sigma_theta)
    lx = np.linalg.cholesky(model.sigma_x)
    means = []
    for l in range(1, rounds + 1):
        m = np.zeros((d, n_prim))
        m[:, :d] = lt
        for i in range(1, l + 1):
            m[:, d * i:d * (i + 1)] = lx / l
        means.append(m)
    x = np.zeros((d, n_prim))
    x[:, :d] = lt
    x[:, d * (rounds + 1):d * (rounds + 2)] = lx
    feats, off = [], d * (rounds + 2)
    for l, a in enumerate(blocks):
        t = a @ means[l]
        t[:, off:off + a.shape[0]] += np.eye(a.shape[0])
        off += a.shape[0]
        feats.append(t)
    return means, feats, x


def test_primitive_construction_matches_covariances():
    model = GaussianModel.random(2, 4)
    rng = np.random.default_rng(1)
    blocks = [rng.standard_normal((r, 2)) for r in (1, 2, 2)]
    means, feats, x = _primitive_covariances(model, blocks)
    t = np.vstack(feats)
    assert np.allclose(feature_cov(model, blocks, [1, 2, 3]), t @ t.T, atol=1e-12)
    assert np.allclose(x_feature_cross(model, blocks, [1, 2, 3]), x @ t.T, atol=1e-12)
    for k in (1, 2, 3):
        assert np.allclose(sample_mean_feature_cross(model, k, blocks, [1, 2, 3]), means[k - 1] @ t.T,
                           atol=1e-12)
        past = np.vstack(feats[:k - 1]) if k > 1 else np.zeros((0, t.shape[1]))
        s = means[k - 1]

        def schur(a, b):
            if b.shape[0] == 0:
                return a @ a.T
            return a @ a.T - a @ b.T @ np.linalg.solve(b @ b.T, b @ a.T)

        cond, cond_x = conditionals_given(model, k, blocks, range(1, k))
        assert np.allclose(cond, schur(s, past), atol=1e-11)
        assert np.allclose(cond_x, schur(s, np.vstack([x, past])), atol=1e-11)


def test_round_one_conditionals(scalar_model):
    model = GaussianModel.random(3, 2)
    cond, cond_x = conditional_covariances(model, 1, StreamState(model))
    marg = model.sigma_marginal
    assert np.allclose(cond, marg, atol=1e-14)
    st_ = model.sigma_theta
    assert np.allclose(cond_x, marg - st_ @ np.linalg.solve(marg, st_), atol=1e-12)


def test_zero_history_is_vacuous():
    model = GaussianModel.random(2, 3)
    cond, cond_x = conditional_covariances(model, 2, _state(model, [np.zeros((1, 2))]))
    bare, bare_x = conditionals_given(model, 2, [], [])
    assert np.allclose(cond, bare, atol=1e-14) and np.allclose(cond_x, bare_x, atol=1e-14)


def test_conditionals_need_history():
    model = GaussianModel.scalar()
    with pytest.raises(DomainError):
        conditional_covariances(model, 3, _state(model, [[[1.0]]]))


def test_scalar_round_two_monte_carlo(scalar_model):
    for name, exact, est, se in stream_covariance_checks(scalar_model, [np.array([[1.0]])], seed=7):
        assert np.all(np.abs(est - exact) <= 3 * se), name


def test_round_one_equals_batch():
    for d, seed in ((1, 0), (3, 5), (6, 0)):
        model = GaussianModel.random(d, seed)
        for beta in (1.5, 4.0, 30.0):
            sol = online_round(model, 1, StreamState(model), beta)
            pt, ref = closed_form_rd(model, 1, beta)
            assert np.allclose(sol.eigenvalues, ref.eigenvalues, atol=1e-10)
            assert np.allclose(sol.alphas, ref.alphas, atol=1e-10)
            assert np.allclose(sol.a_k, ref.a_matrix, atol=1e-10)
            assert abs(sol.rate - pt.rate) < 1e-10 and abs(sol.distortion - pt.distortion) < 1e-10


def test_below_threshold_round_is_silent(scalar_model):
    state = run_online(scalar_model, 1, 8.0)
    sol = online_round(scalar_model, 2, state, 1.0)
    assert sol.a_k.shape == (0, 1) and sol.rate == 0.0
    assert sol.distortion == pytest.approx(state.distortions[0], abs=1e-14)


def test_scalar_distortion_strictly_decreasing_with_mc(scalar_model):
    state = run_online(scalar_model, 3, 8.0)
    dist = state.distortions
    assert dist[0] > dist[1] > dist[2]
    # Monte-Carlo: residual variance of X regressed on the features
    means, feats, x = simulate_stream(scalar_model, state.blocks, 10**6, 11)
    for l in range(1, 4):
        g = np.hstack(feats[:l])
        g = g - g.mean(axis=0)
        t = x - x.mean(axis=0)
        coef, *_ = np.linalg.lstsq(g, t, rcond=None)
        r2 = ((t - g @ coef) ** 2).ravel()
        var_hat, se = r2.mean(), r2.std() / math.sqrt(r2.size)
        exact_var = math.exp(2 * dist[l - 1]) / (2 * math.pi * math.e)
        assert abs(var_hat - exact_var) < 3 * se


def test_single_round_run_is_batch():
    model = GaussianModel.random(4, 1)
    s = run_online(model, 1, 6.0)
    pt, _ = closed_form_rd(model, 1, 6.0)
    assert s.rates[0] == pytest.approx(pt.rate, abs=1e-10)
    assert s.distortions[0] == pytest.approx(pt.distortion, abs=1e-10)


def test_rate_budget_runs_d10():
    model = GaussianModel.random(10, 0)
    curves = {}
    for bits in (4, 8, 10, 14, 16):
        s = run_online(model, 25, RateBudget(bits * math.log(2)))
        assert not any(s.saturated)
        assert np.allclose(s.rates, bits * math.log(2), atol=1e-7)
        d = np.array(s.distortions)
        assert np.all(np.diff(d) <= 1e-9)
        steps = -np.diff(d)
        assert steps[-1] < 0.05 * steps[0]
        curves[bits] = d
    # more rate per round, lower distortion
    for lo, hi in ((4, 8), (8, 10), (10, 14), (14, 16)):
        assert np.all(curves[hi] <= curves[lo] + 1e-9)


def test_eigenvalue_tends_to_one_under_budget(scalar_model):
    s = run_online(scalar_model, 500, RateBudget(1.0))
    top = [float(sol.eigenvalues.max()) for sol in s.solutions]
    assert top[-1] >= 1 - 1e-2
    assert top[0] == pytest.approx(0.75, abs=1e-12)


def test_fixed_beta_eigenvalue_plateau(scalar_model):
    s = run_online(scalar_model, 60, 8.0)
    assert float(s.solutions[-1].eigenvalues.max()) == pytest.approx(1 - 1 / 8, abs=1e-3)


def test_beta_for_round_rate(scalar_model):
    state = StreamState(scalar_model)
    assert beta_for_round_rate(scalar_model, 1, state, 0.0).beta == pytest.approx(4.0, abs=1e-12)
    target = closed_form_rd(scalar_model, 1, 8.0)[0].rate
    inv = beta_for_round_rate(scalar_model, 1, state, target)
    assert inv.reached and inv.beta == pytest.approx(8.0, abs=1e-6)
    betas = [beta_for_round_rate(scalar_model, 1, state, r).beta for r in (0.1, 0.5, 1.0, 3.0)]
    assert betas == sorted(betas)
    prior = run_online(scalar_model, 2, 8.0)
    inv2 = beta_for_round_rate(scalar_model, 3, prior, 0.3)
    assert online_round(scalar_model, 3, prior, inv2.beta).rate == pytest.approx(0.3, abs=1e-8)


def test_saturated_budget_flagged():
    model = GaussianModel(np.eye(1), np.eye(1) * 1e-6)
    s = run_online(model, 2, RateBudget(50.0))
    assert s.saturated[0]


def test_twopass_below_threshold_is_online(scalar_model):
    on = run_online(scalar_model, 2, 1.5)
    tp = run_twopass(scalar_model, 2, 1.5)
    assert all(b.shape[0] == 0 for b in tp.blocks)
    assert tp.rates == on.rates and tp.distortions == on.distortions


def test_twopass_validation(scalar_model):
    with pytest.raises(DomainError):
        run_twopass(scalar_model, 1, 5.0)
    with pytest.raises(DomainError):
        run_twopass(scalar_model, 3, 5.0, passes=0)


@pytest.mark.parametrize("rounds", [3, 4])
def test_more_sweeps_never_raise_loss(rounds):
    model = GaussianModel.random(10, 0)
    for beta in (1.2, 3.0, 20.0):
        on = stream_loss(run_online(model, rounds, beta), beta)
        losses = [stream_loss(run_twopass(model, rounds, beta, n), beta) for n in (1, 2, 3)]
        assert losses[0] <= on + 1e-9
        assert losses[1] <= losses[0] + 1e-9 and losses[2] <= losses[1] + 1e-9


def test_backward_step_beats_random_perturbations():
    model = GaussianModel.random(3, 2)
    beta, rounds = 6.0, 3
    tp = run_twopass(model, rounds, beta)
    base = stream_loss(tp, beta)
    # round 1 was the last one updated, so its projection is optimal given the rest
    rng = np.random.default_rng(0)
    a1 = tp.blocks[0]
    for _ in range(50):
        trial = [a1 + 0.05 * rng.standard_normal(a1.shape)] + tp.blocks[1:]
        s = _state(model, trial)
        _refresh_accounting(s)
        assert stream_loss(s, beta) >= base - 1e-12


def test_online_solution_beats_random_projections():
    model = GaussianModel.random(3, 9)
    beta = 5.0
    prior = run_online(model, 2, beta)
    sol = online_round(model, 3, prior, beta)
    h_before = prior.distortions[-1]
    best = sol.rate - beta * (h_before - sol.distortion)
    rng = np.random.default_rng(42)
    r = sol.a_k.shape[0]
    assert r > 0
    for _ in range(200):
        a = rng.standard_normal((r, 3)) * rng.uniform(0.1, 3.0)
        cond, _ = conditional_covariances(model, 3, prior)
        rate = 0.5 * np.linalg.slogdet(a @ cond @ a.T + np.eye(r))[1]
        dist = distortion_given(model, prior.blocks + [a], [1, 2, 3])
        assert best <= rate - beta * (h_before - dist) + 1e-12


@given(st.integers(1, 3), st.integers(0, 500), st.integers(1, 5), st.integers(0, 10_000))
def test_random_projection_sequences(d, seed, rounds, pseed):
    model = GaussianModel.random(d, seed)
    rng = np.random.default_rng(pseed)
    blocks = [rng.standard_normal((int(rng.integers(0, d + 1)), d)) * rng.uniform(0, 3) for _ in range(rounds)]
    cov = feature_cov(model, blocks, range(1, rounds + 1))
    if cov.size:
        assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov)[0] > 0
    dists = [distortion_given(model, blocks, range(1, l + 1)) for l in range(0, rounds + 1)]
    assert all(b <= a + 1e-9 for a, b in zip(dists, dists[1:]))
    for l in range(1, rounds + 1):
        cond, cond_x = conditionals_given(model, l, blocks, range(1, l))
        lam = ib_eigensystem(cond_x, cond).eigenvalues
        assert np.all((lam >= 0) & (lam <= 1))


@given(st.integers(1, 4), st.integers(0, 300), st.floats(1.1, 100.0))
def test_online_state_invariants(d, seed, beta):
    model = GaussianModel.random(d, seed)
    s = run_online(model, 4, beta)
    assert all(r >= 0 for r in s.rates)
    assert all(b <= a + 1e-9 for a, b in zip(s.distortions, s.distortions[1:]))
    for sol in s.solutions:
        assert np.all((sol.eigenvalues >= 0) & (sol.eigenvalues <= 1))
        assert np.all(sol.alphas >= 0)
    cov = s.joint_feature_cov
    if cov.size:
        assert np.linalg.eigvalsh(cov)[0] > 0
    assert s.global_projection.shape == (sum(b.shape[0] for b in s.blocks), 4 * d)


def test_total_accounting(scalar_model):
    h_x = gaussian_entropy(scalar_model.sigma_marginal)
    silent = run_online(scalar_model, 3, 1.0)
    assert total_accounting(silent) == pytest.approx((0.0, 3 * h_x), abs=1e-14)
    one = run_online(scalar_model, 1, 8.0)
    assert total_accounting(one) == (one.rates[0], one.distortions[0])
    two = run_online(scalar_model, 2, 8.0)
    sols = two.solutions
    assert total_accounting(two) == pytest.approx(
        (sols[0].rate + sols[1].rate, sols[0].distortion + sols[1].distortion), abs=1e-14)


def test_comprehensive_limits(scalar_model):
    res = comprehensive_k2_scalar(scalar_model, [1e-3, 0.5, 5.0, 5e4])
    h_x = entropy_triple(scalar_model, 0)[0]
    assert res.hull[0] == pytest.approx((0.0, 2 * h_x), abs=1e-9)
    zero_w_rate, zero_w_dist = res.points[0]
    assert zero_w_rate < 1e-6 and zero_w_dist == pytest.approx(2 * h_x, abs=1e-6)
    _, floor = comprehensive_limits(scalar_model)
    assert floor == pytest.approx(entropy_triple(scalar_model, 1)[1] + entropy_triple(scalar_model, 2)[1])
    assert abs(res.points[-1][1] - floor) < 1e-3


def test_comprehensive_requires_scalar():
    with pytest.raises(DomainError):
        comprehensive_k2_scalar(GaussianModel.random(2, 0), [1.0])
