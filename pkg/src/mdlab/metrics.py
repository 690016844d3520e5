"""Per-trajectory decoding metrics: spatial commit patterns and EOS behavior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decode import EOS_ID, Trajectory


@dataclass
class TraceMetrics:
    """Derived per-step series for one trajectory.

    front/back are the min/max committed position per step (equal when one
    token commits). ``consecutive_distances[i]`` is, for step d = i + 2, the
    mean over positions committed at d of the distance to the nearest
    position committed at step d - 1; its mean is the scalar proximity
    measure. ``heatmap[d-1, l]`` is the model's top-1 probability at window
    position l before step d committed.
    """

    front: np.ndarray
    back: np.ndarray
    eos_ratio: np.ndarray
    consecutive_distances: np.ndarray
    mean_consecutive_distance: float
    effective_tokens: int
    eos_tokens: int
    heatmap: np.ndarray


def trace_metrics(traj: Trajectory, eos_id: int = EOS_ID) -> TraceMetrics:
    """Compute TraceMetrics; validates the trajectory first (IntegrityError on
    structural damage such as truncated or overlapping steps)."""
    traj.validate()
    T = traj.T
    L = traj.config.L
    front = np.empty(T)
    back = np.empty(T)
    eos_ratio = np.empty(T)
    heatmap = np.empty((T, L))
    for i, rec in enumerate(traj.steps):
        pos = np.array(rec.positions)
        front[i] = pos.min()
        back[i] = pos.max()
        eos_ratio[i] = rec.eos_committed / len(rec.positions)
        heatmap[i] = rec.top1_probs
    dists = np.empty(max(T - 1, 0))
    for i in range(1, T):
        prev = np.array(traj.steps[i - 1].positions)
        cur = np.array(traj.steps[i].positions)
        dists[i - 1] = np.abs(cur[:, None] - prev[None, :]).min(axis=1).mean()
    effective = int((traj.final_window != eos_id).sum())
    return TraceMetrics(
        front=front,
        back=back,
        eos_ratio=eos_ratio,
        consecutive_distances=dists,
        mean_consecutive_distance=float(dists.mean()) if dists.size else 0.0,
        effective_tokens=effective,
        eos_tokens=L - effective,
        heatmap=heatmap,
    )
