import math

import pytest

from ibdistill.core_model import DomainError, GaussianModel, entropy_triple
from ibdistill.scaling import RateSchedule, eval_schedule, first_persistent_k, gap_series


def test_eval_schedule():
    assert eval_schedule(RateSchedule("log", 1.0), 1) == 0.0
    assert eval_schedule(RateSchedule("constant", 2.0), 17) == 2.0
    assert eval_schedule(RateSchedule("log", 1.0), math.e**2) == pytest.approx(2.0, abs=1e-14)
    assert eval_schedule(RateSchedule("sqrt", 0.5, 1.0), 16) == 3.0
    assert eval_schedule(RateSchedule("linear", 0.1), 30) == pytest.approx(3.0)
    assert eval_schedule(RateSchedule("log", 1.0, -5.0), 3) == 0.0
    with pytest.raises(DomainError):
        RateSchedule("cubic")
    with pytest.raises(DomainError):
        eval_schedule(RateSchedule("log"), 0)


def _lambda(k):
    # scalar fixture eigenvalue (k+2) / (2(k+1))
    return (k + 2) / (2 * (k + 1))


def test_gap_matches_closed_form_expression(scalar_model):
    # d=1: invert R = 0.5 log((beta-1)(1-lam)/lam) by hand, then the gap is
    # 0.5 log(1 + k/(k+2) e^{-2R})
    recs = gap_series(scalar_model, RateSchedule("constant", 1.0), 12)
    for r in recs:
        lam = _lambda(r.k)
        beta = 1 + lam * math.exp(2 * r.rate) / (1 - lam)
        assert r.beta == pytest.approx(beta, rel=1e-7)
        d = 0.5 * math.log(lam * beta / (beta - 1)) + entropy_triple(scalar_model, 0)[0]
        assert r.h_x_given_t == pytest.approx(d, abs=1e-8)
        assert r.gap_t_xk == pytest.approx(0.5 * math.log(1 + r.k / (r.k + 2) * math.exp(-2.0)), abs=1e-8)


def test_zero_schedule(scalar_model):
    recs = gap_series(scalar_model, RateSchedule("constant", 0.0), 10)
    h_x, _, h_xt = entropy_triple(scalar_model, 1)
    for r in recs:
        assert r.h_x_given_t == h_x
        assert r.gap_t_theta == pytest.approx(h_x - h_xt, abs=1e-14)


def test_log_schedule_gap(scalar_model):
    recs = gap_series(scalar_model, RateSchedule("log", 1.0), 50)
    assert all(r.gap_t_xk <= 1e-2 for r in recs if r.k >= 7)
    assert first_persistent_k(recs, 1e-2) == 7
    # frozen values of 0.5 log(1 + k/(k+2) / k^2)
    assert recs[5].gap_t_xk == pytest.approx(0.010309643601367805, abs=1e-8)
    assert recs[6].gap_t_xk == pytest.approx(0.007874178484069556, abs=1e-8)


def test_orderings_and_baseline():
    model = GaussianModel.random(3, 1)
    for sched in (RateSchedule("constant", 1.0), RateSchedule("log", 0.5), RateSchedule("sqrt", 0.5)):
        for r in gap_series(model, sched, 30):
            assert r.gap_t_xk >= -1e-9
            assert r.gap_t_theta >= r.h_x_given_sample - r.h_x_given_theta - 1e-9
    base = [entropy_triple(model, k)[1] - entropy_triple(model, k)[2] for k in (1, 10, 100, 1000)]
    assert base == sorted(base, reverse=True) and base[-1] < 1e-2


def test_constant_gap_stays_positive_growing_gaps_vanish(scalar_model):
    const = gap_series(scalar_model, RateSchedule("constant", 1.0), 50)
    assert const[-1].gap_t_xk > 1e-2
    assert const[-1].gap_t_xk == pytest.approx(0.5 * math.log(1 + 50 / 52 * math.exp(-2)), abs=1e-8)
    for sched in (RateSchedule("log", 1.0), RateSchedule("sqrt", 0.5), RateSchedule("linear", 0.1)):
        assert gap_series(scalar_model, sched, 200)[-1].gap_t_xk < 1e-3
    log_recs = gap_series(scalar_model, RateSchedule("log", 1.0), 50)
    assert log_recs[-1].gap_t_theta < const[-1].gap_t_theta


def test_first_persistent_k():
    class R:
        def __init__(self, k, g):
            self.k, self.gap_t_xk = k, g
    assert first_persistent_k([R(1, 0.5), R(2, 0.0), R(3, 0.5), R(4, 0.0)], 0.1) == 4
    assert first_persistent_k([R(1, 0.5)], 0.1) is None
