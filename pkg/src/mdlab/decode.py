"""Non-autoregressive iterative decoding with pluggable position strategies.

Decoding runs T steps. Step d commits n_d tokens: a position-selection
strategy scores the still-masked positions using a ranking distribution (the
raw predictive distribution, optionally with the EOS logit annealed), picks
n_d of them, and a token rule (greedy or temperature sampling) commits tokens
at the chosen positions from the RAW distribution. Ranking and committing are
deliberately separate: EOS annealing reorders which positions decode first
but never alters what gets written.

Committed positions are absorbing. A trajectory records, per step, the chosen
positions, committed tokens, argmax snapshot of the whole window, and how
many committed tokens were EOS; metrics and replay build on those records.

Semi-autoregressive mode partitions the window into blocks decoded left to
right, each with its own step budget; a single block spanning the window
reduces bit-exactly to the non-autoregressive path (same engine, same rng
draws).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import PredictionGrid
from .diffusion import MASK_ID, LatentState
from .errors import ConfigError, IntegrityError, ScheduleError
from .nnops import softmax_last

EOS_ID = 1  # pinned by the Vocabulary contract

STRATEGY_KINDS = (
    "top1_confidence",
    "probability_margin",
    "ancestral",
    "random_initial",
    "delayed_random",
    "planner_guided",
)


@dataclass(frozen=True)
class TokenSchedule:
    """Per-step token allocation rule.

    ``linear`` splits the window evenly (earlier steps absorb the remainder).
    ``progressive`` commits a floor of ``w`` tokens per step and apportions
    the residual proportionally to (d/T)^v, so early steps stay small.
    """

    kind: str = "linear"
    w: int = 3
    v: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "progressive"):
            raise ConfigError(f"unknown token schedule kind: {self.kind!r}")
        if self.kind == "progressive" and (self.w < 1 or self.v < 0):
            raise ConfigError("progressive schedule requires w >= 1 and v >= 0")


@dataclass(frozen=True)
class Strategy:
    kind: str = "top1_confidence"
    d0: int | None = None       # delayed_random only
    pool_size: int = 32         # planner_guided candidate sets (P)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind: {self.kind!r}")
        if self.kind == "delayed_random" and (self.d0 is None or self.d0 < 1):
            raise ConfigError("delayed_random requires d0 >= 1")
        if self.kind == "planner_guided" and self.pool_size < 1:
            raise ConfigError("planner_guided requires pool_size >= 1")


@dataclass(frozen=True)
class TokenMode:
    kind: str = "greedy"
    tau: float = 0.9

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature"):
            raise ConfigError(f"unknown token mode: {self.kind!r}")
        if self.kind == "temperature" and not self.tau > 0:
            raise ConfigError("temperature token mode requires tau > 0")


@dataclass(frozen=True)
class SemiAR:
    block_length: int
    steps_per_block: int


@dataclass(frozen=True)
class DecodeConfig:
    T: int
    L: int
    schedule: TokenSchedule = field(default_factory=TokenSchedule)
    strategy: Strategy = field(default_factory=Strategy)
    token_mode: TokenMode = field(default_factory=TokenMode)
    # None disables EOS annealing; 1.0 is normalized to None, since an
    # always-1 temperature is the identity (this keeps config echoes, and
    # therefore trajectory files, identical between the two spellings).
    eos_lambda_init: float | None = None

    def __post_init__(self):
        if self.T < 1 or self.L < 1:
            raise ConfigError("T and L must be positive")
        if self.eos_lambda_init is not None and self.eos_lambda_init < 1.0:
            raise ConfigError("eos_lambda_init must be >= 1")
        if self.eos_lambda_init == 1.0:
            object.__setattr__(self, "eos_lambda_init", None)
        if self.strategy.kind == "delayed_random" and self.strategy.d0 > self.T:
            raise ConfigError("delayed_random d0 must not exceed T")

    def to_dict(self) -> dict:
        d = {
            "T": self.T, "L": self.L,
            "schedule": {"kind": self.schedule.kind, "w": self.schedule.w,
                         "v": self.schedule.v},
            "strategy": {"kind": self.strategy.kind, "d0": self.strategy.d0,
                         "pool_size": self.strategy.pool_size},
            "token_mode": {"kind": self.token_mode.kind, "tau": self.token_mode.tau},
            "eos_lambda_init": self.eos_lambda_init,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        return cls(
            T=d["T"], L=d["L"],
            schedule=TokenSchedule(**d["schedule"]),
            strategy=Strategy(**d["strategy"]),
            token_mode=TokenMode(**d["token_mode"]),
            eos_lambda_init=d["eos_lambda_init"],
        )


# ---------------------------------------------------------------------------
# allocation and ranking


def allocate_tokens(schedule: TokenSchedule, T: int, L: int) -> np.ndarray:
    """Per-step commit counts n_1..n_T, summing exactly to L.

    Raises ScheduleError when the schedule cannot give every step its floor
    (linear: T > L; progressive: w * T > L).
    """
    if T < 1 or L < 1:
        raise ScheduleError("T and L must be positive")
    if schedule.kind == "linear":
        if T > L:
            raise ScheduleError(f"linear schedule infeasible: T={T} > L={L}")
        base, rem = divmod(L, T)
        counts = np.full(T, base, dtype=np.int64)
        counts[:rem] += 1
        return counts
    # progressive
    if schedule.w * T > L:
        raise ScheduleError(
            f"progressive schedule infeasible: w*T = {schedule.w * T} > L={L}"
        )
    residual = L - schedule.w * T
    d = np.arange(1, T + 1, dtype=np.float64)
    weights = (d / T) ** schedule.v
    quotas = residual * weights / weights.sum()
    shares = np.floor(quotas).astype(np.int64)
    leftover = residual - int(shares.sum())
    if leftover > 0:
        frac = quotas - shares
        # largest fractional remainders first; ties go to later steps
        order = sorted(range(T), key=lambda i: (frac[i], i), reverse=True)
        for i in order[:leftover]:
            shares[i] += 1
    return schedule.w + shares


def eos_lambda(d: int, T: int, lambda_init: float) -> float:
    """Annealed EOS temperature: lambda_init at d=0 decaying linearly to 1 at d=T."""
    if not 1 <= d <= T:
        raise ConfigError(f"step d={d} outside 1..{T}")
    return lambda_init - (lambda_init - 1.0) * (d / T)


def ranking_distribution(logits: np.ndarray, lam: float, eos_id: int = EOS_ID) -> np.ndarray:
    """Distribution used for position ranking: EOS logit divided by lam, then
    softmax. lam = 1 reproduces the raw distribution bit-for-bit."""
    scaled = logits.copy()
    scaled[:, eos_id] = scaled[:, eos_id] / lam
    return softmax_last(scaled)


# ---------------------------------------------------------------------------
# position and token selection


PlanInitial = Callable[[PredictionGrid, np.ndarray, int, np.random.Generator], np.ndarray]


def _top_scored(masked: np.ndarray, scores: np.ndarray, n: int) -> np.ndarray:
    # highest score first; exact ties resolved toward the lowest position index
    order = np.lexsort((masked, -scores))
    return np.sort(masked[order[:n]])


def select_positions(
    strategy: Strategy,
    rank_probs: np.ndarray,
    masked: np.ndarray,
    n_d: int,
    d: int,
    rng: np.random.Generator,
    plan_initial: PlanInitial | None = None,
    grid: PredictionGrid | None = None,
) -> np.ndarray:
    """Choose n_d of the masked positions to commit at step d.

    ``rank_probs`` is the ranking distribution over the whole window;
    ``masked`` holds the eligible window-relative positions in ascending
    order. Returns the chosen positions sorted ascending.
    """
    if n_d > masked.size:
        raise ScheduleError(
            f"step {d} asks for {n_d} commits but only {masked.size} masked positions remain"
        )
    kind = strategy.kind
    if kind == "ancestral":
        return np.sort(rng.choice(masked, size=n_d, replace=False))
    if kind == "random_initial" and d == 1:
        return np.sort(rng.choice(masked, size=n_d, replace=False))
    if kind == "delayed_random" and d == strategy.d0:
        return np.sort(rng.choice(masked, size=n_d, replace=False))
    if kind == "planner_guided" and d == 1:
        if plan_initial is None:
            raise ConfigError("planner_guided strategy requires a planner")
        return np.sort(plan_initial(grid, masked, n_d, rng))
    if kind == "probability_margin":
        part = np.partition(rank_probs[masked], rank_probs.shape[1] - 2, axis=1)
        scores = part[:, -1] - part[:, -2]
        return _top_scored(masked, scores, n_d)
    # top1_confidence (also the off-step behavior of random_initial,
    # delayed_random, and planner_guided)
    scores = rank_probs[masked].max(axis=1)
    return _top_scored(masked, scores, n_d)


def select_tokens(
    logits: np.ndarray,
    positions: np.ndarray,
    token_mode: TokenMode,
    rng: np.random.Generator,
) -> np.ndarray:
    """Commit tokens at ``positions`` from the RAW logits.

    Greedy takes the argmax; temperature samples from softmax(logits / tau).
    The mask column of the logits is -inf, so the mask token can never be
    committed. EOS annealing never reaches this function.
    """
    rows = logits[positions]
    if token_mode.kind == "greedy":
        return rows.argmax(axis=1)
    probs = softmax_last(rows / token_mode.tau)
    out = np.empty(positions.size, dtype=np.int64)
    for i in range(positions.size):
        out[i] = rng.choice(probs.shape[1], p=probs[i])
    return out


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class StepRecord:
    d: int
    positions: tuple[int, ...]
    tokens: tuple[int, ...]
    eos_committed: int
    top1_tokens: np.ndarray   # (L,) raw argmax over the window at this step
    top1_probs: np.ndarray    # (L,) probability of that argmax
    rank_top1_tokens: np.ndarray  # (L,) argmax of the ranking distribution


@dataclass
class Trajectory:
    prompt: np.ndarray
    config: DecodeConfig
    steps: list[StepRecord]
    final_window: np.ndarray

    @property
    def T(self) -> int:
        return len(self.steps)

    def validate(self) -> None:
        """Structural integrity: disjoint steps covering the window, commits
        absorbing, committed tokens never the mask."""
        seen: set[int] = set()
        window = np.full(self.config.L, MASK_ID, dtype=np.int64)
        for rec in self.steps:
            pos = set(rec.positions)
            if pos & seen:
                raise IntegrityError(f"step {rec.d} recommits positions {pos & seen}")
            if len(rec.positions) != len(rec.tokens):
                raise IntegrityError(f"step {rec.d} has mismatched positions/tokens")
            for p, tok in zip(rec.positions, rec.tokens):
                if tok == MASK_ID:
                    raise IntegrityError(f"step {rec.d} commits the mask token")
                window[p] = tok
            seen |= pos
        if len(seen) != self.config.L:
            raise IntegrityError(
                f"trajectory commits {len(seen)} of {self.config.L} positions"
            )
        if not np.array_equal(window, self.final_window):
            raise IntegrityError("replayed commits disagree with the final window")


@dataclass(frozen=True)
class LateOverride:
    """Swap strategy/token mode after a given step (anchored continuations)."""

    after_step: int
    strategy: Strategy
    token_mode: TokenMode


PredictFn = Callable[[LatentState], PredictionGrid]


def _block_plan(cfg: DecodeConfig, semi_ar: SemiAR | None):
    if semi_ar is None:
        return [(0, cfg.L, allocate_tokens(cfg.schedule, cfg.T, cfg.L))], cfg.T
    bl, spb = semi_ar.block_length, semi_ar.steps_per_block
    if bl < 1 or cfg.L % bl != 0:
        raise ScheduleError(f"block_length {bl} must divide L={cfg.L}")
    counts = allocate_tokens(cfg.schedule, spb, bl)
    n_blocks = cfg.L // bl
    plan = [(b * bl, (b + 1) * bl, counts) for b in range(n_blocks)]
    return plan, n_blocks * spb


def decode(
    predict_fn: PredictFn,
    prompt: np.ndarray,
    cfg: DecodeConfig,
    rng: np.random.Generator,
    plan_initial: PlanInitial | None = None,
    semi_ar: SemiAR | None = None,
    forced_positions: list[tuple[int, ...]] | None = None,
    late_override: LateOverride | None = None,
) -> Trajectory:
    """Run the full decode loop; one predictor call per step.

    ``forced_positions`` replays recorded position choices for a prefix of
    steps (tokens are still recomputed); ``late_override`` switches the
    strategy and token mode after a given step. Both exist for the anchoring
    experiment and for trajectory replay.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    plan, total_steps = _block_plan(cfg, semi_ar)
    tokens = np.concatenate([prompt, np.full(cfg.L, MASK_ID, dtype=np.int64)])
    prompt_len = prompt.size
    steps: list[StepRecord] = []
    d = 0
    for start, end, counts in plan:
        for n_d in counts:
            d += 1
            t_remaining = (total_steps - d + 1) / total_steps
            state = LatentState(tokens=tokens, prompt_len=prompt_len, t=t_remaining)
            grid = predict_fn(state)
            lam = 1.0 if cfg.eos_lambda_init is None else eos_lambda(
                d, total_steps, cfg.eos_lambda_init
            )
            rank = ranking_distribution(grid.logits, lam)
            window = tokens[prompt_len:]
            masked = np.flatnonzero(window[start:end] == MASK_ID) + start
            strategy, token_mode = cfg.strategy, cfg.token_mode
            if late_override is not None and d > late_override.after_step:
                strategy, token_mode = late_override.strategy, late_override.token_mode
            if forced_positions is not None and d <= len(forced_positions):
                chosen = np.asarray(forced_positions[d - 1], dtype=np.int64)
                if chosen.size != n_d or not np.isin(chosen, masked).all():
                    raise IntegrityError(
                        f"forced positions at step {d} are not currently maskable"
                    )
                chosen = np.sort(chosen)
            else:
                chosen = select_positions(strategy, rank, masked, n_d, d, rng,
                                          plan_initial=plan_initial, grid=grid)
            committed = select_tokens(grid.logits, chosen, token_mode, rng)
            window[chosen] = committed
            steps.append(StepRecord(
                d=d,
                positions=tuple(int(p) for p in chosen),
                tokens=tuple(int(t) for t in committed),
                eos_committed=int((committed == EOS_ID).sum()),
                top1_tokens=grid.probs.argmax(axis=1),
                top1_probs=grid.probs.max(axis=1),
                rank_top1_tokens=rank.argmax(axis=1),
            ))
    return Trajectory(prompt=prompt, config=cfg, steps=steps,
                      final_window=tokens[prompt_len:].copy())


def semi_ar_decode(
    predict_fn: PredictFn,
    prompt: np.ndarray,
    cfg: DecodeConfig,
    semi_ar: SemiAR,
    rng: np.random.Generator,
) -> Trajectory:
    """Block-wise left-to-right decoding; blocks share one rng stream.

    With block_length = L and steps_per_block = T this is exactly ``decode``:
    the engine, allocation, and rng consumption are identical.
    """
    return decode(predict_fn, prompt, cfg, rng, semi_ar=semi_ar)
