"""Experiment harness: sampling-variant comparisons, the two-stage anchoring
study, and configuration sweeps.

Every experiment returns ExperimentRecords holding the raw per-run outcomes
next to the aggregates, so aggregates can always be recomputed and audited.
All randomness flows through derive_rng(root_seed, ...) with stable string
paths, which makes each record regenerable bit-exactly from its stored seeds
and is what keeps worker-count changes from affecting results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .decode import (DecodeConfig, LateOverride, Strategy, TokenMode,
                     Trajectory, decode)
from .errors import ConfigError, IntegrityError
from .rng import derive_rng
from .stats import bootstrap_ci, pass_at_k

SUCCESS_EPS = 1e-12  # rewards are exact floats; 1.0 means solved


@dataclass
class ExperimentRecord:
    kind: str
    point: dict
    outcomes: object  # raw rewards: ndarray, or dict of ndarrays per category
    aggregates: dict
    seeds: dict
    seconds: float = 0.0
    _aggregate_fn: Callable | None = field(default=None, repr=False, compare=False)

    def recompute_aggregates(self) -> dict:
        """Re-derive the aggregate dict from the stored outcomes (audit path)."""
        return dict(self._aggregate_fn(self.outcomes)) if self._aggregate_fn else {}


# ---------------------------------------------------------------------------
# sampling variants


def named_variants(d0: int | None = None) -> dict[str, tuple[Strategy, TokenMode]]:
    """The four sampling variants compared against each other; delayed
    randomness needs its trigger step d0."""
    variants = {
        "top1": (Strategy("top1_confidence"), TokenMode("greedy")),
        "random_initial": (Strategy("random_initial"), TokenMode("greedy")),
        "temperature": (Strategy("top1_confidence"), TokenMode("temperature", tau=0.9)),
    }
    if d0 is not None:
        variants["delayed_random"] = (Strategy("delayed_random", d0=d0),
                                      TokenMode("greedy"))
    return variants


def _consumes_rng(strategy: Strategy, token_mode: TokenMode) -> bool:
    return strategy.kind not in ("top1_confidence", "probability_margin") or \
        token_mode.kind != "greedy"


def run_variant_samples(
    predict_fn,
    instances,
    cfg: DecodeConfig,
    n_samples: int,
    root_seed: int,
    reward_fn: Callable,
    variant_name: str = "",
    plan_initial=None,
) -> np.ndarray:
    """Rewards with shape (len(instances), n_samples).

    A fully deterministic configuration is decoded once per instance and the
    result replicated: the decode loop draws nothing from its rng, so the
    replicas are exactly what repeated runs would produce.
    """
    deterministic = not _consumes_rng(cfg.strategy, cfg.token_mode) and \
        plan_initial is None
    out = np.empty((len(instances), n_samples))
    for i, inst in enumerate(instances):
        prompt = np.asarray(inst.prompt)
        reps = 1 if deterministic else n_samples
        vals = []
        for j in range(reps):
            rng = derive_rng(root_seed, "variant", variant_name,
                             inst.instance_id, j)
            traj = decode(predict_fn, prompt, cfg, rng, plan_initial=plan_initial)
            vals.append(float(reward_fn(inst, traj.final_window)))
        out[i] = vals * n_samples if deterministic else vals
    return out


def default_ks(n_samples: int) -> list[int]:
    ks, k = [], 1
    while k <= n_samples:
        ks.append(k)
        k *= 2
    return ks


def pass_curve(rewards: np.ndarray, ks, rng: np.random.Generator,
               resamples: int = 10_000) -> dict:
    """Per-variant pass@k curve: per-instance estimators, their mean, and a
    percentile bootstrap interval over instances."""
    success = rewards >= 1.0 - SUCCESS_EPS
    curve = {}
    for k in ks:
        per_instance = np.array([pass_at_k(list(row), k) for row in success])
        mean, lo, hi = bootstrap_ci(per_instance, rng, resamples=resamples)
        curve[int(k)] = {"mean": mean, "lo": lo, "hi": hi}
    return curve


def randomness_comparison(
    predict_fn,
    instances,
    cfg: DecodeConfig,
    variants: dict[str, tuple[Strategy, TokenMode]],
    n_samples: int,
    root_seed: int,
    reward_fn: Callable,
    ks=None,
    resamples: int = 10_000,
) -> dict[str, ExperimentRecord]:
    """pass@k curves for each sampling variant on a shared instance set."""
    ks = list(ks) if ks is not None else default_ks(n_samples)
    if max(ks) > n_samples:
        raise ConfigError(f"pass@{max(ks)} needs at least that many samples")
    records = {}
    for name, (strategy, token_mode) in variants.items():
        t0 = time.time()
        vcfg = replace(cfg, strategy=strategy, token_mode=token_mode)
        rewards = run_variant_samples(predict_fn, instances, vcfg, n_samples,
                                      root_seed, reward_fn, variant_name=name)
        agg_fn = lambda out, _ks=tuple(ks), _name=name: {
            "pass_at_k": pass_curve(out, _ks, derive_rng(root_seed, "ci", _name),
                                    resamples=resamples)
        }
        records[name] = ExperimentRecord(
            kind="randomness_comparison",
            point={"variant": name, "config": vcfg.to_dict(),
                   "n_samples": n_samples},
            outcomes=rewards,
            aggregates=agg_fn(rewards),
            seeds={"root_seed": root_seed,
                   "instance_ids": [inst.instance_id for inst in instances]},
            seconds=time.time() - t0,
            _aggregate_fn=agg_fn,
        )
    return records


# ---------------------------------------------------------------------------
# anchoring


LATE_MODES = {
    # uniform position choice after the anchor; tokens stay greedy
    "positional": (Strategy("ancestral"), TokenMode("greedy")),
    # confidence positions; token sampling supplies the randomness
    "token": (Strategy("top1_confidence"), TokenMode("temperature", tau=0.9)),
    # degenerate control: no late randomness, every branch equals its anchor
    "none": (Strategy("top1_confidence"), TokenMode("greedy")),
}


def anchoring_experiment(
    predict_fn,
    instances,
    cfg: DecodeConfig,
    reward_fn: Callable,
    root_seed: int,
    n_initial: int = 32,
    anchor_count: int = 4,
    continuations: int = 8,
    anchor_depth: int = 4,
    late_mode: str = "positional",
    resamples: int = 10_000,
) -> ExperimentRecord:
    """Two stages: (1) per instance, n_initial greedy decodes that differ only
    in a uniformly random first commit, classified correct/incorrect; (2) up
    to anchor_count anchors per category and instance have their first
    anchor_depth steps replayed exactly, then branch `continuations` times
    under late-stage stochasticity. Branch outcomes are pooled per category.
    """
    if late_mode not in LATE_MODES:
        raise ConfigError(f"unknown late_mode {late_mode!r}; "
                          f"pick one of {sorted(LATE_MODES)}")
    if n_initial < 2 * anchor_count:
        raise ConfigError("n_initial must be at least twice anchor_count")
    if not 1 <= anchor_depth < cfg.T:
        raise ConfigError("anchor_depth must lie strictly inside the step range")
    if continuations < 1:
        raise ConfigError("need at least one continuation per anchor")

    t0 = time.time()
    stage1_cfg = replace(cfg, strategy=Strategy("random_initial"),
                         token_mode=TokenMode("greedy"))
    late_strategy, late_tokens = LATE_MODES[late_mode]
    override = LateOverride(after_step=anchor_depth, strategy=late_strategy,
                            token_mode=late_tokens)

    branch_rewards = {"correct": [], "incorrect": []}
    anchor_counts = {"correct": 0, "incorrect": 0}
    for inst in instances:
        prompt = np.asarray(inst.prompt)
        anchors = {"correct": [], "incorrect": []}
        for j in range(n_initial):
            traj = decode(predict_fn, prompt, stage1_cfg,
                          derive_rng(root_seed, "anchor-init", inst.instance_id, j))
            solved = reward_fn(inst, traj.final_window) >= 1.0 - SUCCESS_EPS
            anchors["correct" if solved else "incorrect"].append(traj)
        for cat, pool in anchors.items():
            if len(pool) > anchor_count:
                pick = derive_rng(root_seed, "anchor-pick", inst.instance_id, cat)
                idx = np.sort(pick.choice(len(pool), size=anchor_count,
                                          replace=False))
                pool = [pool[i] for i in idx]
            anchor_counts[cat] += len(pool)
            for a_i, anchor in enumerate(pool):
                prefix = [rec.positions for rec in anchor.steps[:anchor_depth]]
                for m in range(continuations):
                    branch = decode(
                        predict_fn, prompt, stage1_cfg,
                        derive_rng(root_seed, "branch", inst.instance_id, cat,
                                   a_i, m),
                        forced_positions=prefix, late_override=override,
                    )
                    _check_prefix(branch, anchor, anchor_depth)
                    branch_rewards[cat].append(
                        float(reward_fn(inst, branch.final_window)))

    outcomes = {cat: np.array(vals) for cat, vals in branch_rewards.items()}

    def agg_fn(out):
        agg = {}
        for cat in ("correct", "incorrect"):
            vals = out[cat]
            if len(vals) == 0:
                agg[cat] = {"branches": 0}
                continue
            success = (vals >= 1.0 - SUCCESS_EPS).astype(float)
            mean, lo, hi = bootstrap_ci(success, derive_rng(root_seed, "ci", cat),
                                        resamples=resamples)
            agg[cat] = {"branches": len(vals), "anchors": anchor_counts[cat],
                        "mean": mean, "lo": lo, "hi": hi}
        return agg

    return ExperimentRecord(
        kind="anchoring",
        point={"config": cfg.to_dict(), "n_initial": n_initial,
               "anchor_count": anchor_count, "continuations": continuations,
               "anchor_depth": anchor_depth, "late_mode": late_mode},
        outcomes=outcomes,
        aggregates=agg_fn(outcomes),
        seeds={"root_seed": root_seed,
               "instance_ids": [inst.instance_id for inst in instances]},
        seconds=time.time() - t0,
        _aggregate_fn=agg_fn,
    )


def _check_prefix(branch: Trajectory, anchor: Trajectory, depth: int) -> None:
    for b, a in zip(branch.steps[:depth], anchor.steps[:depth]):
        if b.positions != a.positions or b.tokens != a.tokens:
            raise IntegrityError(
                f"branch diverged from its anchor inside the replayed prefix "
                f"at step {b.d}"
            )


# ---------------------------------------------------------------------------
# sweeps


def ablation_sweep(
    predict_fn,
    instances,
    reward_fn: Callable,
    root_seed: int,
    axis: str,
    values,
    cfg_fn: Callable[[object], DecodeConfig],
    hook_fn: Callable[[object], object] | None = None,
    n_samples: int = 1,
    resamples: int = 10_000,
) -> list[ExperimentRecord]:
    """One record per grid value. cfg_fn(value) builds the decode config for
    that point; hook_fn(value), when given, supplies the first-step planner
    hook (pool-size sweeps reuse one trained scorer across all points)."""
    records = []
    for value in values:
        t0 = time.time()
        cfg = cfg_fn(value)
        hook = hook_fn(value) if hook_fn is not None else None
        rewards = run_variant_samples(
            predict_fn, instances, cfg, n_samples, root_seed, reward_fn,
            variant_name=f"{axis}={value}", plan_initial=hook,
        )

        def agg_fn(out, _v=value):
            per_instance = (out >= 1.0 - SUCCESS_EPS).mean(axis=1)
            mean, lo, hi = bootstrap_ci(
                per_instance, derive_rng(root_seed, "ci", axis, str(_v)),
                resamples=resamples)
            return {"accuracy": {"mean": mean, "lo": lo, "hi": hi}}

        records.append(ExperimentRecord(
            kind="ablation",
            point={"axis": axis, "value": value, "config": cfg.to_dict(),
                   "n_samples": n_samples},
            outcomes=rewards,
            aggregates=agg_fn(rewards),
            seeds={"root_seed": root_seed,
                   "instance_ids": [inst.instance_id for inst in instances]},
            seconds=time.time() - t0,
            _aggregate_fn=agg_fn,
        ))
    return records
