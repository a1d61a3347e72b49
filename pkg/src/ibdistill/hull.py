"""Lower convex hull of (rate, distortion) point clouds."""
from __future__ import annotations

from typing import Sequence


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_lower(points: Sequence[tuple[float, float]], indices: bool = False):
    """Lower-left convex hull by Andrew's monotone chain.

    Returns the hull vertices sorted by rate. Collinear interior points are
    dropped. The chain stops at the minimum-distortion vertex, so the result
    is the part of the hull a rate-distortion curve lives on: rate
    increasing, distortion decreasing. With ``indices=True`` the positions of
    the vertices in ``points`` are returned instead.
    """
    if not points:
        raise ValueError("need at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    chain: list[int] = []
    for i in order:
        p = points[i]
        if chain and points[chain[-1]][0] == p[0]:
            continue  # same rate, higher distortion
        while len(chain) >= 2 and _cross(points[chain[-2]], points[chain[-1]], p) <= 0:
            chain.pop()
        chain.append(i)
    # truncate once distortion stops decreasing
    d_min = min(range(len(chain)), key=lambda j: (points[chain[j]][1], points[chain[j]][0]))
    chain = chain[: d_min + 1]
    return chain if indices else [tuple(points[i]) for i in chain]


def interpolate_hull(hull: Sequence[tuple[float, float]], rate: float) -> float:
    """Piecewise-linear distortion of a sorted hull at ``rate``; flat beyond
    the last vertex, +inf before the first."""
    if rate < hull[0][0]:
        return float("inf")
    for (r0, d0), (r1, d1) in zip(hull, hull[1:]):
        if r0 <= rate <= r1:
            return d0 + (d1 - d0) * (rate - r0) / (r1 - r0)
    return hull[-1][1]
