"""Trajectory files: JSONL serialization and digest-verified replay.

A trajectory file is a header record (decode config echo, seed path, instance
id, prompt, final window) followed by one record per step carrying the
committed positions and tokens, the EOS-commit count, and a sha256 digest of
the step's top-1 probability snapshot (the float64 bytes). Replay needs only
this file plus the model checkpoint: it re-runs the predictor step by step,
recomputes each snapshot digest, and applies the recorded commits, so any
drift between the file and the model surfaces as an integrity error rather
than silently different numbers. Digests compare exact float bytes, so replay
must use the same kernel backend that produced the file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decode import (EOS_ID, MASK_ID, DecodeConfig, StepRecord, Trajectory,
                     eos_lambda, ranking_distribution)
from .diffusion import LatentState
from .errors import IntegrityError

SCHEMA = "mdlab.traj.v1"


def snapshot_digest(top1_probs: np.ndarray) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(top1_probs, dtype="<f8").tobytes()
    ).hexdigest()


def trajectory_bytes(traj: Trajectory, seed_path=(), instance_id: str = "") -> bytes:
    header = {
        "schema": SCHEMA,
        "config": traj.config.to_dict(),
        "seed_path": list(seed_path),
        "instance_id": instance_id,
        "prompt": [int(t) for t in traj.prompt],
        "final_window": [int(t) for t in traj.final_window],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for rec in traj.steps:
        lines.append(json.dumps({
            "d": rec.d,
            "positions": list(rec.positions),
            "tokens": list(rec.tokens),
            "eos_committed": rec.eos_committed,
            "top1_digest": snapshot_digest(rec.top1_probs),
        }, sort_keys=True))
    return ("\n".join(lines) + "\n").encode()


def save_trajectory(traj: Trajectory, path, seed_path=(), instance_id: str = "") -> None:
    Path(path).write_bytes(trajectory_bytes(traj, seed_path, instance_id))


@dataclass
class TrajectoryFile:
    config: DecodeConfig
    seed_path: list
    instance_id: str
    prompt: np.ndarray
    final_window: np.ndarray
    steps: list[dict]


def load_trajectory_file(path) -> TrajectoryFile:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise IntegrityError(f"{path}: empty trajectory file")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise IntegrityError(f"{path}: unexpected schema {header.get('schema')!r}")
    cfg = DecodeConfig.from_dict(header["config"])
    steps = [json.loads(ln) for ln in lines[1:]]
    if len(steps) != cfg.T:
        raise IntegrityError(
            f"{path}: {len(steps)} step records for a {cfg.T}-step config"
        )
    return TrajectoryFile(
        config=cfg,
        seed_path=header["seed_path"],
        instance_id=header["instance_id"],
        prompt=np.array(header["prompt"], dtype=np.int64),
        final_window=np.array(header["final_window"], dtype=np.int64),
        steps=steps,
    )


def replay_trajectory(predict_fn, tf: TrajectoryFile) -> Trajectory:
    """Re-run the predictor over the recorded commits, verifying every step.

    Checks, per step: the recorded snapshot digest against the recomputed
    top-1 probabilities, the commit count against the EOS count, and mask
    discipline; then the final window against the header echo. Returns the
    reconstructed Trajectory (with live snapshot arrays, unlike the file).
    """
    cfg = tf.config
    window = np.full(cfg.L, MASK_ID, dtype=np.int64)
    steps: list[StepRecord] = []
    total = cfg.T
    for i, rec in enumerate(tf.steps):
        d = rec["d"]
        if d != i + 1:
            raise IntegrityError(f"step records out of order: saw d={d} at index {i}")
        tokens_now = np.concatenate([tf.prompt, window])
        state = LatentState(tokens=tokens_now, prompt_len=len(tf.prompt),
                            t=(total - d + 1) / total)
        grid = predict_fn(state)
        top1_p = grid.probs.max(axis=1)
        if snapshot_digest(top1_p) != rec["top1_digest"]:
            raise IntegrityError(
                f"step {d}: model snapshot does not match the recorded digest "
                "(wrong checkpoint, kernel backend, or edited file)"
            )
        pos = np.array(rec["positions"], dtype=np.int64)
        toks = np.array(rec["tokens"], dtype=np.int64)
        if len(pos) != len(toks):
            raise IntegrityError(f"step {d}: positions/tokens length mismatch")
        if np.any(window[pos] != MASK_ID):
            raise IntegrityError(f"step {d}: recommits already-committed positions")
        if int((toks == EOS_ID).sum()) != rec["eos_committed"]:
            raise IntegrityError(f"step {d}: EOS commit count disagrees with record")
        window[pos] = toks
        lam = 1.0 if cfg.eos_lambda_init is None else eos_lambda(
            d, total, cfg.eos_lambda_init
        )
        rank = ranking_distribution(grid.logits, lam)
        steps.append(StepRecord(
            d=d,
            positions=tuple(int(p) for p in pos),
            tokens=tuple(int(t) for t in toks),
            eos_committed=rec["eos_committed"],
            top1_tokens=grid.probs.argmax(axis=1),
            top1_probs=top1_p,
            rank_top1_tokens=rank.argmax(axis=1),
        ))
    if not np.array_equal(window, tf.final_window):
        raise IntegrityError("replayed final window disagrees with the header echo")
    traj = Trajectory(prompt=tf.prompt, config=cfg, steps=steps,
                      final_window=window)
    traj.validate()
    return traj
