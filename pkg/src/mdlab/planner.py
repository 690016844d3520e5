"""Learned scoring of first-step commit sets.

A small permutation-invariant encoder reads the backbone's hidden vectors at a
candidate set of window positions (taken from one forward pass on the fully
masked window) plus embeddings of the positions themselves, and outputs the
probability that committing exactly that set first, then finishing greedily,
yields a correct answer. At decode time the scorer reranks P uniformly drawn
candidate sets and the best one becomes the first commit.

Training data comes from rollouts: for each prompt, sample S random first
sets, finish each greedily, and label the set with the resulting task reward.
The backbone stays frozen throughout; a digest of its weights travels with
the dataset so a retrained backbone cannot silently invalidate the features.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnops
from .decode import DecodeConfig, PredictionGrid, Strategy, TokenMode, decode
from .errors import (ConfigError, DataError, IntegrityError, InvalidInputError,
                     ScheduleError)
from .optim import AdamW
from .rng import derive_rng

DATASET_SCHEMA = "mdlab.plansets.v1"


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class PlannerConfig:
    """Architecture of the candidate-set scorer.

    feature_dim must equal the backbone's embedding width; max_positions
    bounds the window positions the embedding table can represent.
    """

    feature_dim: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 512
    pos_dim: int = 16
    max_positions: int = 256
    dropout: float = 0.3

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "pos_dim": self.pos_dim,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)


@dataclass
class PlannerParams:
    config: PlannerConfig
    blocks: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def num_params(self) -> int:
        return int(sum(b.size for b in self.blocks.values()))


def init_planner(config: PlannerConfig, rng: np.random.Generator) -> PlannerParams:
    c = config
    dm, ff = c.d_model, c.ffn_dim

    def w(fan_in, *shape):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    blocks: dict[str, np.ndarray] = {
        "in.w": w(c.feature_dim, c.feature_dim, dm),
        "in.b": np.zeros(dm),
        "posemb.tab": w(c.pos_dim, c.max_positions, c.pos_dim),
        "pos.w": w(c.pos_dim, c.pos_dim, dm),
        "pos.b": np.zeros(dm),
        "final.ln.g": np.ones(dm),
        "final.ln.b": np.zeros(dm),
        # Zero head: every candidate set scores 0.5 until training moves it,
        # so an untrained (or signal-free) scorer cannot express a positional
        # preference through the random init.
        "head.w": np.zeros((dm, 1)),
        "head.b": np.zeros(1),
    }
    for i in range(c.n_layers):
        pre = f"layer{i}."
        blocks[pre + "att.ln.g"] = np.ones(dm)
        blocks[pre + "att.ln.b"] = np.zeros(dm)
        for nm in ("wq", "wk", "wv", "wo"):
            blocks[pre + "att." + nm] = w(dm, dm, dm)
        for nm in ("bq", "bk", "bv", "bo"):
            blocks[pre + "att." + nm] = np.zeros(dm)
        blocks[pre + "ffn.ln.g"] = np.ones(dm)
        blocks[pre + "ffn.ln.b"] = np.zeros(dm)
        blocks[pre + "ffn.w1"] = w(dm, dm, ff)
        blocks[pre + "ffn.b1"] = np.zeros(ff)
        blocks[pre + "ffn.w2"] = w(ff, ff, dm)
        blocks[pre + "ffn.b2"] = np.zeros(dm)
    return PlannerParams(config=config, blocks=blocks)


def _forward(params, feats, positions, drop_masks=None):
    """feats: (N, B, D), positions: (N, B) ints. Returns (logits (N,), cache).

    drop_masks is None for evaluation, or (input_mask, encoder_masks) of
    precomputed inverted-dropout multipliers for training.
    """
    c = params.config
    p = params.blocks
    if positions.min() < 0 or positions.max() >= c.max_positions:
        raise InvalidInputError(
            f"candidate positions outside [0, {c.max_positions})"
        )
    u, c_in = nnops.linear_fwd(feats, p["in.w"], p["in.b"])
    pe_rows, c_tab = nnops.embed_fwd(positions, p["posemb.tab"])
    pe, c_pos = nnops.linear_fwd(pe_rows, p["pos.w"], p["pos.b"])
    pre_act = u + pe
    x = np.maximum(pre_act, 0.0)
    m_in = None if drop_masks is None else drop_masks[0]
    if m_in is not None:
        x = x * m_in
    enc_masks = None if drop_masks is None else drop_masks[1]
    x, c_stack = nnops.encoder_stack_fwd(x, p, c.n_layers, c.n_heads, drop_masks=enc_masks)
    h, c_lnf = nnops.layernorm_fwd(x, p["final.ln.g"], p["final.ln.b"])
    tok, c_head = nnops.linear_fwd(h, p["head.w"], p["head.b"])
    logits = tok[..., 0].mean(axis=-1)
    cache = (c_in, c_tab, c_pos, pre_act, m_in, c_stack, c_lnf, c_head, feats.shape)
    return logits, cache


def _backward(params, dlogits, cache):
    c = params.config
    c_in, c_tab, c_pos, pre_act, m_in, c_stack, c_lnf, c_head, shape = cache
    n, b, _ = shape
    dtok = np.zeros((n, b, 1))
    dtok[..., 0] = dlogits[:, None] / b
    dh, dw_head, db_head = nnops.linear_bwd(dtok, c_head)
    dx, dg_f, db_f = nnops.layernorm_bwd(dh, c_lnf)
    dx, grads = nnops.encoder_stack_bwd(dx, c_stack, params.blocks, c.n_layers, c.n_heads)
    if m_in is not None:
        dx = dx * m_in
    dpre = dx * (pre_act > 0.0)
    dfeats, dw_in, db_in = nnops.linear_bwd(dpre, c_in)
    dpe_rows, dw_pos, db_pos = nnops.linear_bwd(dpre, c_pos)
    dtab = nnops.embed_bwd(dpe_rows, c_tab)
    grads.update({
        "in.w": dw_in, "in.b": db_in,
        "posemb.tab": dtab,
        "pos.w": dw_pos, "pos.b": db_pos,
        "final.ln.g": dg_f, "final.ln.b": db_f,
        "head.w": dw_head, "head.b": db_head,
    })
    return grads, dfeats


def planner_score(params: PlannerParams, feats: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Evaluation-mode success probabilities for a batch of candidate sets.

    feats (N, B, D) or (B, D); positions (N, B) or (B,). Returns (N,) floats
    in (0, 1), or a scalar for unbatched input. The score is invariant to
    permuting a set's members.
    """
    feats = np.asarray(feats, dtype=np.float64)
    positions = np.asarray(positions)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
        positions = positions[None]
    logits, _ = _forward(params, feats, positions)
    out = nnops.sigmoid(logits)
    return float(out[0]) if single else out


def planner_token_scores(params: PlannerParams, feats: np.ndarray,
                         positions: np.ndarray) -> np.ndarray:
    """Per-candidate scalar outputs (B,) before pooling, evaluation mode.

    The set score is exactly sigmoid(mean of these), which makes the pooling
    stage independently checkable; duplicate candidates each contribute their
    own scalar to the mean.
    """
    c = params.config
    p = params.blocks
    feats = np.asarray(feats, dtype=np.float64)[None]
    positions = np.asarray(positions)[None]
    u, _ = nnops.linear_fwd(feats, p["in.w"], p["in.b"])
    pe_rows, _ = nnops.embed_fwd(positions, p["posemb.tab"])
    pe, _ = nnops.linear_fwd(pe_rows, p["pos.w"], p["pos.b"])
    x = np.maximum(u + pe, 0.0)
    x, _ = nnops.encoder_stack_fwd(x, p, c.n_layers, c.n_heads)
    h, _ = nnops.layernorm_fwd(x, p["final.ln.g"], p["final.ln.b"])
    tok, _ = nnops.linear_fwd(h, p["head.w"], p["head.b"])
    return tok[0, :, 0]


def loss_and_grad(params, feats, positions, labels, drop_masks=None):
    """Mean BCE over the batch plus gradients for every block."""
    logits, cache = _forward(params, feats, positions, drop_masks)
    losses, dlogit = nnops.bce_from_logits(logits, labels)
    loss = float(losses.mean())
    grads, _ = _backward(params, dlogit / len(losses), cache)
    return loss, grads


def make_drop_masks(config: PlannerConfig, n: int, b: int, rng: np.random.Generator):
    """Fresh inverted-dropout multipliers for one training batch."""
    if config.dropout == 0.0:
        return None
    dm = config.d_model
    m_in = nnops.dropout_mask((n, b, dm), config.dropout, rng)
    enc = [
        (nnops.dropout_mask((n, b, dm), config.dropout, rng),
         nnops.dropout_mask((n, b, dm), config.dropout, rng))
        for _ in range(config.n_layers)
    ]
    return (m_in, enc)


# ---------------------------------------------------------------------------
# rollout dataset


@dataclass
class PlannerDataset:
    """Rollout-labelled candidate sets with cached backbone features.

    feats[i] holds the backbone hidden vectors (B, D) at positions[i], taken
    from the fully masked window of prompt prompt_ids[i]; labels[i] is the
    task reward after greedy completion.
    """

    set_size: int
    feature_dim: int
    positions: np.ndarray  # (N, B) int
    labels: np.ndarray  # (N,) float
    prompt_ids: list[str]
    feats: np.ndarray  # (N, B, D) float64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def build_training_set(
    predict_fn,
    instances,
    cfg: DecodeConfig,
    reward_fn: Callable[[object, np.ndarray], float],
    sets_per_prompt: int,
    seed: int,
    backbone_digest: str | None = None,
) -> PlannerDataset:
    """Algorithm: one predictor call per prompt caches features at every
    window position; each sampled first set is finished greedily (top-1
    confidence, greedy tokens) and labelled with its reward."""
    from .decode import allocate_tokens

    import logging

    counts = allocate_tokens(cfg.schedule, cfg.T, cfg.L)
    b = int(counts[0])
    greedy_cfg = replace(cfg, strategy=Strategy("top1_confidence"),
                         token_mode=TokenMode("greedy"))
    all_pos, all_labels, all_feats, ids = [], [], [], []
    feature_dim = None
    for inst in instances:
        prompt = np.asarray(inst.prompt)
        masked_state = _fully_masked_state(prompt, cfg.L)
        grid = predict_fn(masked_state)
        feature_dim = grid.hidden.shape[-1]
        rng_sets = derive_rng(seed, "plansets", inst.instance_id)
        for s in range(sets_per_prompt):
            u = np.sort(rng_sets.choice(cfg.L, size=b, replace=False))
            traj = decode(predict_fn, prompt, greedy_cfg,
                          derive_rng(seed, "planroll", inst.instance_id, s),
                          forced_positions=[tuple(int(x) for x in u)])
            try:
                label = float(reward_fn(inst, traj.final_window))
            except Exception as exc:  # scoring failed: drop, never mislabel
                logging.getLogger(__name__).warning(
                    "dropping rollout %s/%d: scorer raised %s", inst.instance_id, s, exc
                )
                continue
            all_pos.append(u)
            all_labels.append(label)
            all_feats.append(grid.hidden[u])
            ids.append(inst.instance_id)
    if not all_pos:
        raise DataError("no instances to build a planner dataset from")
    return PlannerDataset(
        set_size=b,
        feature_dim=int(feature_dim),
        positions=np.array(all_pos, dtype=np.int64),
        labels=np.array(all_labels, dtype=np.float64),
        prompt_ids=ids,
        feats=np.array(all_feats, dtype=np.float64),
        meta={
            "schema": DATASET_SCHEMA,
            "backbone_digest": backbone_digest,
            "decode_config": cfg.to_dict(),
            "sets_per_prompt": sets_per_prompt,
            "seed": seed,
        },
    )


def _fully_masked_state(prompt, gen_len):
    from .decode import MASK_ID
    from .diffusion import LatentState

    tokens = np.concatenate([prompt, np.full(gen_len, MASK_ID, dtype=np.int64)])
    return LatentState(tokens=tokens, prompt_len=len(prompt))


def balance_dataset(ds: PlannerDataset, rng: np.random.Generator) -> PlannerDataset:
    """Subsample to equal counts of successful and failed rollouts.

    Rollout pools are usually skewed (a decent backbone succeeds from most
    first sets), and a skewed pool hands the scorer a label-independent
    shortcut: the first optimizer steps chase the pool's base rate through
    whatever feature direction matches the pool mean, which acts like a
    positional preference even when the labels are pure noise. Balancing
    removes that term, so early training is driven by the difference between
    success and failure feature means, which is zero in expectation for
    shuffled labels."""
    pos = np.flatnonzero(ds.labels >= 0.5)
    neg = np.flatnonzero(ds.labels < 0.5)
    n = min(len(pos), len(neg))
    if n == 0:
        raise DataError("cannot balance a dataset where every label is one class")
    keep = np.sort(np.concatenate([
        rng.choice(pos, size=n, replace=False),
        rng.choice(neg, size=n, replace=False),
    ]))
    return replace(
        ds,
        positions=ds.positions[keep],
        labels=ds.labels[keep],
        prompt_ids=[ds.prompt_ids[i] for i in keep],
        feats=ds.feats[keep],
        meta={**ds.meta, "balanced": True},
    )


def save_dataset(ds: PlannerDataset, base_path) -> None:
    """Write records to <base>.jsonl and the dense feature blob to <base>.bin."""
    base = Path(base_path)
    blob = np.ascontiguousarray(ds.feats, dtype="<f8").tobytes()
    header = {
        "schema": DATASET_SCHEMA,
        "count": len(ds),
        "set_size": ds.set_size,
        "feature_dim": ds.feature_dim,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": ds.meta,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ds)):
        lines.append(json.dumps({
            "prompt_id": ds.prompt_ids[i],
            "positions": [int(x) for x in ds.positions[i]],
            "label": float(ds.labels[i]),
        }, sort_keys=True))
    base.with_suffix(".jsonl").write_text("\n".join(lines) + "\n")
    base.with_suffix(".bin").write_bytes(blob)


def load_dataset(base_path) -> PlannerDataset:
    base = Path(base_path)
    lines = base.with_suffix(".jsonl").read_text().splitlines()
    if not lines:
        raise IntegrityError("empty planner dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA:
        raise IntegrityError(f"unexpected dataset schema: {header.get('schema')!r}")
    n, b, d = header["count"], header["set_size"], header["feature_dim"]
    if len(lines) - 1 != n:
        raise IntegrityError(f"dataset record count mismatch: header says {n}, "
                             f"found {len(lines) - 1}")
    blob = base.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise IntegrityError("feature blob does not match its recorded digest")
    feats = np.frombuffer(blob, dtype="<f8")
    if feats.size != n * b * d:
        raise IntegrityError("feature blob size does not match header shape")
    recs = [json.loads(ln) for ln in lines[1:]]
    return PlannerDataset(
        set_size=b,
        feature_dim=d,
        positions=np.array([r["positions"] for r in recs], dtype=np.int64),
        labels=np.array([r["label"] for r in recs], dtype=np.float64),
        prompt_ids=[r["prompt_id"] for r in recs],
        feats=feats.reshape(n, b, d).astype(np.float64),
        meta=header["meta"],
    )


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class PlannerTrainConfig:
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    val_fraction_mod: int = 5  # one prompt in this many goes to validation


def _split_by_prompt(prompt_ids: list[str], mod: int) -> np.ndarray:
    """True where the example belongs to validation; whole prompts move
    together, keyed on a stable hash of the prompt id."""
    val = np.zeros(len(prompt_ids), dtype=bool)
    for i, pid in enumerate(prompt_ids):
        h = int.from_bytes(hashlib.sha256(pid.encode()).digest()[:4], "little")
        val[i] = h % mod == 0
    return val


def rerank_accuracy(params: PlannerParams, ds: PlannerDataset, idx: np.ndarray) -> float:
    """Fraction of prompts whose highest-scored candidate set carries a label
    of at least 0.5. Prompts with a single example count too (their only set
    is trivially top-ranked)."""
    by_prompt: dict[str, list[int]] = {}
    for i in idx:
        by_prompt.setdefault(ds.prompt_ids[i], []).append(int(i))
    if not by_prompt:
        raise DataError("no validation prompts available for reranking accuracy")
    scores = planner_score(params, ds.feats[idx], ds.positions[idx])
    pos_of = {int(j): k for k, j in enumerate(idx)}
    hits = 0
    for rows in by_prompt.values():
        best = max(rows, key=lambda j: (scores[pos_of[j]], -j))
        hits += int(ds.labels[best] >= 0.5)
    return hits / len(by_prompt)


def train_planner(
    ds: PlannerDataset,
    config: PlannerConfig,
    rng: np.random.Generator,
    train_cfg: PlannerTrainConfig = PlannerTrainConfig(),
    expected_backbone_digest: str | None = None,
) -> tuple[PlannerParams, list[dict]]:
    """Fit the scorer with AdamW; keeps the epoch snapshot with the best
    validation reranking accuracy. Raises DataError when the labels carry no
    signal (all identical) and IntegrityError when the dataset was built
    against a different backbone than expected."""
    if expected_backbone_digest is not None:
        got = ds.meta.get("backbone_digest")
        if got != expected_backbone_digest:
            raise IntegrityError(
                f"dataset was built against backbone {got}, expected "
                f"{expected_backbone_digest}"
            )
    if ds.feature_dim != config.feature_dim:
        raise ConfigError(
            f"dataset feature_dim {ds.feature_dim} != config {config.feature_dim}"
        )
    if np.all(ds.labels == ds.labels[0]):
        raise DataError("degenerate planner labels: every rollout has the same reward")

    val_mask = _split_by_prompt(ds.prompt_ids, train_cfg.val_fraction_mod)
    if val_mask.all() or not val_mask.any():
        # tiny corpora can land every prompt on one side; fall back to an
        # example-level 80/20 split so training remains possible
        val_mask = np.zeros(len(ds), dtype=bool)
        val_mask[:: train_cfg.val_fraction_mod] = True
    train_idx = np.flatnonzero(~val_mask)
    val_idx = np.flatnonzero(val_mask)
    if np.all(ds.labels[train_idx] == ds.labels[train_idx][0]):
        raise DataError("degenerate planner labels in the training split")

    params = init_planner(config, rng)
    opt = AdamW(params.blocks, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    history: list[dict] = []
    best_acc, best_blocks, best_epoch = -1.0, None, -1
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            masks = make_drop_masks(config, len(batch), ds.set_size, rng)
            loss, grads = loss_and_grad(
                params, ds.feats[batch], ds.positions[batch], ds.labels[batch], masks
            )
            opt.step(grads)
            losses.append(loss)
        acc = rerank_accuracy(params, ds, val_idx)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_rerank": acc})
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best_blocks = {k: v.copy() for k, v in params.blocks.items()}
    params.blocks = best_blocks
    params.meta = {
        "trained_set_size": ds.set_size,
        "backbone_digest": ds.meta.get("backbone_digest"),
        "val_rerank": best_acc,
        "best_epoch": best_epoch,
    }
    return params, history


# ---------------------------------------------------------------------------
# decode-time hook


def plan_initial_positions(
    hidden: np.ndarray,
    masked: np.ndarray,
    n: int,
    pool_size: int,
    params: PlannerParams | None,
    rng: np.random.Generator,
    score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Draw pool_size uniform candidate sets of size n from the masked
    positions, score each, return the winner (ties break to the earliest
    draw). pool_size=1 reduces to a uniform random first step.

    score_fn(feats (P, B, D), sets (P, B)) -> (P,) overrides the learned
    scorer; exactly one of params / score_fn must be given.
    """
    if pool_size < 1:
        raise ConfigError(f"pool_size must be >= 1, got {pool_size}")
    if (params is None) == (score_fn is None):
        raise ConfigError("provide either planner params or a score_fn")
    if n > len(masked):
        raise ScheduleError(f"cannot commit {n} of {len(masked)} masked positions")
    cands = np.stack([
        np.sort(rng.choice(masked, size=n, replace=False))
        for _ in range(pool_size)
    ])
    feats = hidden[cands]
    scores = score_fn(feats, cands) if score_fn else planner_score(params, feats, cands)
    return cands[int(np.argmax(scores))]


def make_plan_initial(params: PlannerParams, pool_size: int):
    """Adapter giving decode() its first-step hook. Warns (rather than fails)
    when the schedule's first-step budget differs from the set size the
    scorer was trained on; mean pooling keeps scores well-defined for any
    size, which is what lets one checkpoint serve multiple step counts."""
    import logging

    trained = params.meta.get("trained_set_size")

    def hook(grid: PredictionGrid, masked: np.ndarray, n: int,
             rng: np.random.Generator) -> np.ndarray:
        if trained is not None and n != trained:
            logging.getLogger(__name__).warning(
                "planner trained on sets of %d, asked to score sets of %d",
                trained, n,
            )
        return plan_initial_positions(grid.hidden, masked, n, pool_size, params, rng)

    return hook
