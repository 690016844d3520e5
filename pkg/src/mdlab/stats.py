"""Evaluation statistics: the unbiased pass@k estimator and bootstrap CIs."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidInputError


def pass_at_k(outcomes: Sequence[bool], k: int) -> float:
    """Unbiased pass@k from n sampled outcomes with c successes.

    Computes 1 - C(n-c, k) / C(n, k) in exact rational arithmetic before the
    final float conversion, so large n cannot overflow or lose precision.
    ``k`` must not exceed the number of outcomes.
    """
    n = len(outcomes)
    if n == 0:
        raise InvalidInputError("pass_at_k requires at least one outcome")
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}], got {k}")
    c = sum(bool(o) for o in outcomes)
    if n - c < k:
        return 1.0
    frac = 1 - Fraction(math.comb(n - c, k), math.comb(n, k))
    return float(frac)


def bootstrap_ci(values: Sequence[float], rng: np.random.Generator,
                 level: float = 0.95, resamples: int = 10_000) -> tuple[float, float, float]:
    """Percentile bootstrap interval for the mean of ``values``.

    Returns (mean, lo, hi). Deterministic given the rng state. Constant input
    collapses to a zero-width interval.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("bootstrap_ci requires at least one value")
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    if resamples < 1:
        raise DomainError("resamples must be positive")
    idx = rng.integers(0, arr.size, size=(resamples, arr.size))
    means = arr[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(arr.mean()), float(lo), float(hi)


def paired_bootstrap_delta(a: Sequence[float], b: Sequence[float],
                           rng: np.random.Generator, level: float = 0.95,
                           resamples: int = 10_000) -> tuple[float, float, float]:
    """Bootstrap CI for mean(a) - mean(b) over paired per-instance values.

    Resamples instances, keeping each pair together. Returns (delta, lo, hi).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise InvalidInputError("paired bootstrap requires equal-length sequences")
    diffs = a - b
    return bootstrap_ci(diffs, rng, level=level, resamples=resamples)
