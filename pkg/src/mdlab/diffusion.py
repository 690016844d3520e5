"""Masked (absorbing-state) discrete diffusion: schedule, corruption, posterior, NELBO.

The forward process interpolates between a clean categorical sequence and the
all-mask state: at noise level t each position independently carries its clean
token with probability alpha(t) and the mask token otherwise. The reverse
posterior for a masked position unmasks it with probability
(alpha_s - alpha_t) / (1 - alpha_t) when stepping from time t back to s < t.

Prompt positions are conditioning: they sit at t = 0 and are never corrupted.
The variational bound (NELBO) is a time integral of mask-weighted cross
entropy; this module evaluates it either by Monte Carlo over (t, mask pattern)
draws or exactly, for short windows, by enumerating all 2^L mask patterns and
integrating the time weight in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, InvalidInputError, OrderingError

MASK_ID = 0  # pinned by the Vocabulary contract

# Lower truncation of the Monte Carlo time draw t ~ U(EPS_T, 1]. The excluded
# sliver [0, EPS_T) contributes O(EPS_T) to the integral because the weighted
# integrand stays bounded as t -> 0.
EPS_T = 1e-3

EXACT_ENUM_MAX_POSITIONS = 6


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise schedule alpha(t). Only the linear schedule alpha = 1 - t is supported."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ConfigError(f"unsupported schedule kind: {self.kind!r} (only 'linear')")

    def alpha(self, t: float) -> float:
        _check_time(t)
        return 1.0 - t

    def alpha_prime(self, t: float) -> float:
        _check_time(t)
        return -1.0

    def discretize(self, T: int) -> np.ndarray:
        """Grid t_i = i / T, i = 0..T, as float64."""
        if T < 1:
            raise DomainError(f"T must be positive, got {T}")
        return np.arange(T + 1, dtype=np.float64) / T


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    """Survival probability of a clean token at noise level t."""
    return schedule.alpha(t)


def posterior_unmask_prob(schedule: NoiseSchedule, t: float, s: float) -> float:
    """Probability that a masked position unmasks when stepping t -> s, s < t.

    This is (alpha_s - alpha_t) / (1 - alpha_t), the coefficient on the clean
    token in the reverse posterior's masked branch.
    """
    _check_time(t)
    _check_time(s)
    if s >= t:
        raise OrderingError(f"posterior step requires s < t, got s={s}, t={t}")
    a_t = schedule.alpha(t)
    a_s = schedule.alpha(s)
    if a_t >= 1.0:
        raise DomainError("posterior undefined at t with alpha(t) = 1 (no mask mass)")
    return (a_s - a_t) / (1.0 - a_t)


@dataclass
class LatentState:
    """A partially masked sequence: prompt prefix plus generation window.

    ``tokens`` is the full sequence (prompt included); ``t`` is the remaining
    noise level when known (None for states assembled outside the forward
    process). Prompt positions are never masked.
    """

    tokens: np.ndarray
    prompt_len: int
    t: float | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise InvalidInputError("state tokens must be one-dimensional")
        if not 0 <= self.prompt_len <= self.tokens.size:
            raise InvalidInputError("prompt_len out of range for state tokens")
        if np.any(self.tokens[: self.prompt_len] == MASK_ID):
            raise InvalidInputError("prompt positions must not be masked")

    @property
    def gen_len(self) -> int:
        return self.tokens.size - self.prompt_len

    def gen_window(self) -> np.ndarray:
        return self.tokens[self.prompt_len :]

    def masked_positions(self) -> np.ndarray:
        """Window-relative indices of masked generation positions."""
        return np.flatnonzero(self.gen_window() == MASK_ID)


def forward_mask(
    x: np.ndarray,
    t: float,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    prompt_len: int = 0,
) -> LatentState:
    """Sample the forward marginal q(z_t | x) over the generation window.

    Each generation position keeps its clean token with probability alpha(t)
    and becomes the mask token otherwise; prompt positions pass through
    untouched. ``x`` must be clean (no mask tokens anywhere).
    """
    x = np.asarray(x, dtype=np.int64)
    if np.any(x == MASK_ID):
        raise InvalidInputError("clean sequence contains the mask id")
    a = schedule.alpha(t)
    z = x.copy()
    gen = z[prompt_len:]
    drop = rng.random(gen.size) >= a
    gen[drop] = MASK_ID
    return LatentState(tokens=z, prompt_len=prompt_len, t=t)


def time_weight(schedule: NoiseSchedule, t: float, eps: float = EPS_T) -> float:
    """Per-sample loss weight for t drawn uniformly from (eps, 1].

    The weight is -alpha'(t) / (1 - alpha(t)) (= 1/t for the linear schedule)
    scaled by the truncated draw's measure (1 - eps), so that averaging
    weighted cross entropies over draws estimates the NELBO integral.
    """
    _check_time(t)
    denom = 1.0 - schedule.alpha(t)
    if denom <= 0.0:
        raise DomainError("time weight undefined at t with alpha(t) = 1")
    return (1.0 - eps) * (-schedule.alpha_prime(t)) / denom


@dataclass(frozen=True)
class NelboEstimate:
    """NELBO value in nats; stderr/n_samples set only for Monte Carlo."""

    value: float
    stderr: float | None = None
    n_samples: int | None = None


PredictProbsFn = Callable[[np.ndarray], np.ndarray]


def _pattern_ce(probs: np.ndarray, x_gen: np.ndarray, masked: np.ndarray) -> float:
    """Sum of -log p(true token) over the masked window positions."""
    p_true = probs[masked, x_gen[masked]]
    if np.any(p_true <= 0.0):
        return math.inf
    return float(-np.log(p_true).sum())


def nelbo(
    predict_probs: PredictProbsFn,
    x: np.ndarray,
    prompt_len: int,
    schedule: NoiseSchedule,
    estimator: str = "exact_enumeration",
    n_samples: int = 10000,
    rng: np.random.Generator | None = None,
    eps: float = EPS_T,
) -> NelboEstimate:
    """Negative ELBO of clean sequence ``x`` under a predictive model.

    ``predict_probs`` maps a full token array (prompt + window, possibly
    masked) to per-position probabilities over the vocabulary for the
    generation window, shape (gen_len, V). The bound is reported in its
    positive minimization form (lower is better). A model that assigns zero
    probability to a true token yields ``inf``, the distinguished overflow
    value.

    ``exact_enumeration`` sums over every mask pattern of the window,
    weighting a pattern with k masked positions by the closed-form time
    integral Beta(k, L-k+1); the substitution u = 1 - alpha(t) makes that
    weight schedule-independent. Window length is capped at
    EXACT_ENUM_MAX_POSITIONS. ``monte_carlo`` averages weighted cross
    entropies over (t, mask pattern) draws with t ~ U(eps, 1].
    """
    x = np.asarray(x, dtype=np.int64)
    if np.any(x == MASK_ID):
        raise InvalidInputError("clean sequence contains the mask id")
    gen_len = x.size - prompt_len
    if gen_len <= 0:
        raise InvalidInputError("sequence has no generation window")
    x_gen = x[prompt_len:]

    if estimator == "exact_enumeration":
        if gen_len > EXACT_ENUM_MAX_POSITIONS:
            raise DomainError(
                f"exact enumeration supports at most {EXACT_ENUM_MAX_POSITIONS} "
                f"generation positions, got {gen_len}"
            )
        total = 0.0
        fact = math.factorial
        for bits in range(1, 1 << gen_len):
            masked = np.array([i for i in range(gen_len) if bits >> i & 1], dtype=np.int64)
            k = masked.size
            z = x.copy()
            z[prompt_len + masked] = MASK_ID
            ce = _pattern_ce(predict_probs(z), x_gen, masked)
            if math.isinf(ce):
                return NelboEstimate(value=math.inf)
            weight = fact(k - 1) * fact(gen_len - k) / fact(gen_len)
            total += weight * ce
        return NelboEstimate(value=total)

    if estimator == "monte_carlo":
        if rng is None:
            raise ConfigError("monte_carlo estimator requires an rng")
        if n_samples < 1:
            raise DomainError("n_samples must be positive")
        samples = np.empty(n_samples, dtype=np.float64)
        for i in range(n_samples):
            t = eps + (1.0 - eps) * rng.random()
            state = forward_mask(x, t, rng, schedule, prompt_len=prompt_len)
            masked = state.masked_positions()
            if masked.size == 0:
                samples[i] = 0.0
                continue
            ce = _pattern_ce(predict_probs(state.tokens), x_gen, masked)
            if math.isinf(ce):
                return NelboEstimate(value=math.inf, n_samples=n_samples)
            samples[i] = time_weight(schedule, t, eps=eps) * ce
        value = float(samples.mean())
        stderr = float(samples.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else None
        return NelboEstimate(value=value, stderr=stderr, n_samples=n_samples)

    raise ConfigError(f"unknown NELBO estimator: {estimator!r}")
