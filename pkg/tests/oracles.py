"""Independent reference computations the metric code is checked against."""

from fractions import Fraction
from itertools import combinations

import numpy as np


def pass_by_enumeration(n: int, c: int, k: int) -> tuple[Fraction, Fraction]:
    """(P[at least one success], P[all succeed]) over every k-subset of n trials with c successes."""
    outcomes = [True] * c + [False] * (n - c)
    subsets = list(combinations(range(n), k))
    any_ok = sum(1 for s in subsets if any(outcomes[i] for i in s))
    all_ok = sum(1 for s in subsets if all(outcomes[i] for i in s))
    return Fraction(any_ok, len(subsets)), Fraction(all_ok, len(subsets))


def riemann_auc(values, t_max: int, points: int = 100_000) -> float:
    """Midpoint rule on the linear interpolant of p(1..t_max), normalised by the axis length.

    The grid is aligned to the integer knots, so each cell lies on one linear piece.
    """
    values = list(values) + [values[-1]] * (t_max - len(values))
    if t_max == 1:
        return float(values[0])
    cells = max(1, points // (t_max - 1)) * (t_max - 1)
    width = (t_max - 1) / cells
    mids = 1 + width * (np.arange(cells) + 0.5)
    p = np.interp(mids, np.arange(1, t_max + 1), values)
    return float(p.sum() * width / (t_max - 1))


def monte_carlo_moments(z, draws: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Sample every note as an independent Bernoulli(z_j) and measure progress moments."""
    rng = np.random.default_rng(seed)
    z = np.asarray(z, dtype=float)
    progress = (rng.random((draws, z.size)) < z).mean(axis=1)
    return float(progress.mean()), float(progress.var())


def telescoped_ppt(values) -> Fraction:
    """Sum of per-turn increments (p(0)=0) divided by the first turn reaching the final value."""
    exact = [Fraction(v) for v in values]
    increments = [b - a for a, b in zip([Fraction(0)] + exact, exact)]
    t_first = next(t for t, v in enumerate(exact, start=1) if v == exact[-1])
    return sum(increments, Fraction(0)) / t_first


def random_monotone_curve(rng, t_max: int, n_notes: int) -> list[float]:
    achieved = [rng.choice([None, *range(1, t_max + 1)]) for _ in range(n_notes)]
    return [sum(1 for a in achieved if a is not None and a <= t) / n_notes for t in range(1, t_max + 1)]
