"""How fast the rate must grow with the sample count for the compressed
representation to keep up with the full sample."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .core_model import DomainError, GaussianModel, entropy_triple, invert_rate_map
from .gaussian_ib import batch_bottleneck_matrix, parametric_rd

KINDS = ("constant", "log", "sqrt", "linear")


@dataclass(frozen=True)
class RateSchedule:
    kind: str
    coefficient: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.coefficient:g}:{self.offset:g}"


def eval_schedule(s: RateSchedule, k: int) -> float:
    """Rate budget in nats at sample count k, clamped at zero."""
    if k < 1:
        raise DomainError("k must be >= 1")
    growth = {
        "constant": 1.0,
        "log": math.log(k),
        "sqrt": math.sqrt(k),
        "linear": float(k),
    }[s.kind]
    return max(0.0, s.coefficient * growth + s.offset)


@dataclass(frozen=True)
class GapRecord:
    k: int
    rate: float
    beta: float
    h_x_given_t: float
    h_x_given_sample: float
    h_x_given_theta: float
    reached: bool

    @property
    def gap_t_xk(self) -> float:
        return self.h_x_given_t - self.h_x_given_sample

    @property
    def gap_t_theta(self) -> float:
        return self.h_x_given_t - self.h_x_given_theta


def gap_series(model: GaussianModel, schedule: RateSchedule, k_max: int,
               tol: float = 1e-8) -> list[GapRecord]:
    """Distortion of the rate-R(k) compressed mean against the uncompressed
    and oracle baselines for k = 1..k_max."""
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    out = []
    for k in range(1, k_max + 1):
        h_x, h_xk, h_xt = entropy_triple(model, k)
        lam = batch_bottleneck_matrix(model, k).eigenvalues
        target = eval_schedule(schedule, k)
        crit = [1.0 / (1.0 - v) for v in lam if v < 1.0]
        zero_beta = min(crit) if crit else 1.0
        inv = invert_rate_map(lambda b: parametric_rd(lam, b, h_x)[0], target, tol=tol,
                              zero_beta=zero_beta)
        _, dist, _ = parametric_rd(lam, inv.beta, h_x)
        out.append(GapRecord(k, target, inv.beta, dist, h_xk, h_xt, inv.reached))
    return out


def first_persistent_k(records: list[GapRecord], eps: float) -> int | None:
    """Smallest k from which gap_t_xk stays below ``eps`` through the end."""
    k0 = None
    for r in records:
        if r.gap_t_xk < eps:
            if k0 is None:
                k0 = r.k
        else:
            k0 = None
    return k0
