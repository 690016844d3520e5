"""Bidirectional denoising transformer over token sequences.

The backbone consumes a partially masked sequence and emits, for every
generation position, a categorical distribution over the vocabulary with the
mask token excluded. Inference runs through the fused kernel backends in
``kernels``; training runs a batched numpy forward that keeps the activation
caches needed by the hand-written backward pass.

There is no causal masking: attention is full, and predictions at any
position may depend on both sides. Time conditioning is off by default (the
masked count carries the same information); when enabled, a sinusoidal
feature of the remaining-noise time is projected and added to every
position's embedding.
"""

from __future__ import annotations

import csv
import logging
import math
import time as _time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels, nnops
from .diffusion import EPS_T, MASK_ID, LatentState, NoiseSchedule, time_weight
from .errors import ConfigError, InvalidInputError, TrainingError
from .optim import AdamW

log = logging.getLogger("mdlab.backbone")

TIME_FEAT_DIM = 8


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    max_len: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    hidden_dim: int = 128
    time_conditioning: bool = False
    # Extra scale on the output head below the 1/sqrt(fan_in) used everywhere
    # else; keeps fresh predictions near uniform (entropy within a fraction of
    # a percent of log(V-1)) without zeroing the head.
    head_init_scale: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.vocab_size < 2 or self.max_len < 1:
            raise ConfigError("vocab_size must be >= 2 and max_len >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "embed_dim": self.embed_dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "hidden_dim": self.hidden_dim,
            "time_conditioning": self.time_conditioning,
            "head_init_scale": self.head_init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class BackboneParams:
    """Flat dict of named float64 parameter blocks plus a pack cache.

    In-place mutation (the optimizer) must be followed by ``bump()`` so the
    packed inference view is rebuilt; the training loop does this after every
    step.
    """

    def __init__(self, config: BackboneConfig, blocks: dict[str, np.ndarray]):
        self.config = config
        self.blocks = blocks
        self._version = 0
        self._packed: kernels.PackedParams | None = None
        self._packed_version = -1

    def bump(self) -> None:
        self._version += 1

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.blocks.values())

    def packed(self) -> kernels.PackedParams:
        if self._packed is None or self._packed_version != self._version:
            self._packed = kernels.pack_params(
                self.blocks, self.config.n_layers, self.config.n_heads
            )
            self._packed_version = self._version
        return self._packed


def init_params(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    """Scaled-Gaussian init: every block at std 1/sqrt(fan_in) (embeddings use
    fan_in = embed_dim), except the output head which is further scaled by
    config.head_init_scale."""
    d, ff, v = config.embed_dim, config.hidden_dim, config.vocab_size
    sd = 1.0 / math.sqrt(d)
    blocks: dict[str, np.ndarray] = {
        "embed.tok": rng.normal(0.0, sd, size=(v, d)),
        "embed.pos": rng.normal(0.0, sd, size=(config.max_len, d)),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}."
        blocks[pre + "att.ln.g"] = np.ones(d)
        blocks[pre + "att.ln.b"] = np.zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            blocks[pre + f"att.{nm}"] = rng.normal(0.0, sd, size=(d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            blocks[pre + f"att.{nm}"] = np.zeros(d)
        blocks[pre + "ffn.ln.g"] = np.ones(d)
        blocks[pre + "ffn.ln.b"] = np.zeros(d)
        blocks[pre + "ffn.w1"] = rng.normal(0.0, sd, size=(d, ff))
        blocks[pre + "ffn.b1"] = np.zeros(ff)
        blocks[pre + "ffn.w2"] = rng.normal(0.0, 1.0 / math.sqrt(ff), size=(ff, d))
        blocks[pre + "ffn.b2"] = np.zeros(d)
    blocks["final.ln.g"] = np.ones(d)
    blocks["final.ln.b"] = np.zeros(d)
    blocks["head.w"] = rng.normal(0.0, config.head_init_scale * sd, size=(d, v))
    blocks["head.b"] = np.zeros(v)
    if config.time_conditioning:
        blocks["time.w"] = rng.normal(0.0, 1.0 / math.sqrt(TIME_FEAT_DIM), size=(TIME_FEAT_DIM, d))
        blocks["time.b"] = np.zeros(d)
    return BackboneParams(config, blocks)


def time_features(t) -> np.ndarray:
    """Sinusoidal features of remaining-noise time, shape (..., TIME_FEAT_DIM)."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    freqs = 2.0 ** np.arange(TIME_FEAT_DIM // 2)
    ang = math.pi * t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _time_vec(params: BackboneParams, t: float | None) -> np.ndarray:
    cfg = params.config
    if not cfg.time_conditioning:
        return np.zeros(cfg.embed_dim)
    if t is None:
        raise InvalidInputError("time_conditioning is on but the state carries no time")
    return time_features(t) @ params.blocks["time.w"] + params.blocks["time.b"]


@dataclass(frozen=True)
class PredictionGrid:
    """Per-position categorical predictions over the generation window.

    ``probs[l, v]`` is the model's probability of token v at window position
    l. Rows sum to one and the mask token's column is exactly zero. ``hidden``
    is the final-layer representation the head consumed: logits equal
    ``hidden @ head_w + head_b`` (with the mask column then pinned to -inf).
    """

    probs: np.ndarray   # (gen_len, V)
    logits: np.ndarray  # (gen_len, V), mask column -inf
    hidden: np.ndarray  # (gen_len, D)


def predict(params: BackboneParams, state: LatentState) -> PredictionGrid:
    """Deterministic forward pass on the active kernel backend."""
    cfg = params.config
    if state.tokens.size > cfg.max_len:
        raise ConfigError(
            f"sequence length {state.tokens.size} exceeds max_len {cfg.max_len}"
        )
    if np.any(state.tokens >= cfg.vocab_size) or np.any(state.tokens < 0):
        raise InvalidInputError("state contains token ids outside the vocabulary")
    h_full = kernels.forward_hidden(params.packed(), state.tokens, _time_vec(params, state.t))
    hidden = h_full[state.prompt_len :]
    logits = hidden @ params.blocks["head.w"] + params.blocks["head.b"]
    logits[:, MASK_ID] = -np.inf
    return PredictionGrid(probs=nnops.softmax_last(logits), logits=logits, hidden=hidden)


# ---------------------------------------------------------------------------
# training path (batched numpy forward + manual backward)


def _embed_train(params, z, t_batch):
    """Batched embedding with optional time conditioning. Returns (x, cache)."""
    blocks = params.blocks
    b, s = z.shape
    x = blocks["embed.tok"][z] + blocks["embed.pos"][:s]
    feats = None
    if params.config.time_conditioning:
        feats = time_features(t_batch)  # (B, F)
        x = x + (feats @ blocks["time.w"] + blocks["time.b"])[:, None, :]
    return x, (z, feats)


def _forward_train(params, z, t_batch):
    """Full-batch forward; returns (logits (B,S,V), caches)."""
    blocks = params.blocks
    cfg = params.config
    x, c_emb = _embed_train(params, z, t_batch)
    x, c_stack = nnops.encoder_stack_fwd(x, blocks, cfg.n_layers, cfg.n_heads)
    h, c_lnf = nnops.layernorm_fwd(x, blocks["final.ln.g"], blocks["final.ln.b"])
    logits, c_head = nnops.linear_fwd(h, blocks["head.w"], blocks["head.b"])
    logits[..., MASK_ID] = -np.inf
    return logits, (c_emb, c_stack, c_lnf, c_head)


def _backward_train(params, dlogits, caches) -> dict[str, np.ndarray]:
    blocks = params.blocks
    cfg = params.config
    c_emb, c_stack, c_lnf, c_head = caches
    grads: dict[str, np.ndarray] = {}
    dh, grads["head.w"], grads["head.b"] = nnops.linear_bwd(dlogits, c_head)
    dx, grads["final.ln.g"], grads["final.ln.b"] = nnops.layernorm_bwd(dh, c_lnf)
    dx, stack_grads = nnops.encoder_stack_bwd(dx, c_stack, blocks, cfg.n_layers, cfg.n_heads)
    grads.update(stack_grads)
    z, feats = c_emb
    grads["embed.tok"] = nnops.embed_bwd(dx, (z, blocks["embed.tok"].shape))
    dpos = dx.reshape(-1, z.shape[1], dx.shape[-1]).sum(axis=0)
    gp = np.zeros_like(blocks["embed.pos"])
    gp[: z.shape[1]] = dpos
    grads["embed.pos"] = gp
    if cfg.time_conditioning:
        dvec = dx.sum(axis=1)  # (B, D)
        grads["time.w"] = feats.T @ dvec
        grads["time.b"] = dvec.sum(axis=0)
    return grads


def corrupt_batch(xs: np.ndarray, prompt_len: int, schedule: NoiseSchedule,
                  rng: np.random.Generator, eps: float = EPS_T):
    """Sample (t_b, z_b, weights) for a clean batch.

    Each sequence draws its own t ~ U(eps, 1]; generation positions mask
    independently with probability 1 - alpha(t). ``weights`` is (B, S) with
    the per-draw loss weight at masked generation positions and zero
    elsewhere, so that sum(weights * ce) / B estimates the mean NELBO.
    """
    b, s = xs.shape
    t_batch = eps + (1.0 - eps) * rng.random(b)
    alive = np.array([schedule.alpha(t) for t in t_batch])
    drop = rng.random((b, s - prompt_len)) >= alive[:, None]
    z = xs.copy()
    z[:, prompt_len:][drop] = MASK_ID
    weights = np.zeros((b, s))
    w_t = np.array([time_weight(schedule, t, eps=eps) for t in t_batch])
    weights[:, prompt_len:] = drop * w_t[:, None]
    return t_batch, z, weights


def loss_and_grad(params: BackboneParams, xs: np.ndarray, prompt_len: int,
                  rng: np.random.Generator,
                  schedule: NoiseSchedule | None = None):
    """Monte Carlo NELBO loss over a clean batch and its parameter gradients.

    Returns (loss, grads). The loss is the mean over the batch of the
    mask-weighted cross entropy at the sampled noise level, i.e. the same
    estimator the math core's ``nelbo`` uses, assembled from the shared
    ``time_weight`` helper.
    """
    schedule = schedule or NoiseSchedule()
    xs = np.asarray(xs, dtype=np.int64)
    if np.any(xs == MASK_ID):
        raise InvalidInputError("training batch contains the mask id")
    t_batch, z, weights = corrupt_batch(xs, prompt_len, schedule, rng)
    return loss_and_grad_corrupted(params, xs, z, weights / xs.shape[0], t_batch)


def loss_and_grad_corrupted(params: BackboneParams, xs, z, weights, t_batch):
    """Deterministic loss/grad on an already-corrupted batch.

    Split out from ``loss_and_grad`` so gradient checks can re-evaluate the
    identical objective while finite-differencing parameters.
    """
    logits, caches = _forward_train(params, z, t_batch)
    loss, dlogits = nnops.weighted_ce_from_logits(logits, xs, weights)
    grads = _backward_train(params, dlogits, caches)
    for k, v in params.blocks.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return loss, grads


def heldout_nelbo(params: BackboneParams, xs: np.ndarray, prompt_len: int,
                  rng: np.random.Generator, rounds: int = 4,
                  schedule: NoiseSchedule | None = None):
    """Monte Carlo NELBO averaged over a held-out set.

    Runs ``rounds`` independent corruptions of every sequence through the
    batched eval forward. Returns (mean, stderr) where stderr is the standard
    error of the mean over all per-sequence-per-round samples.
    """
    schedule = schedule or NoiseSchedule()
    xs = np.asarray(xs, dtype=np.int64)
    samples = []
    for _ in range(rounds):
        t_batch, z, weights = corrupt_batch(xs, prompt_len, schedule, rng)
        logits, _ = _forward_train(params, z, t_batch)
        m = np.max(logits, axis=-1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        tgt = np.take_along_axis(logp, xs[..., None], axis=-1)[..., 0]
        samples.append(-(weights * tgt).sum(axis=1))
    flat = np.concatenate(samples)
    stderr = float(flat.std(ddof=1) / math.sqrt(flat.size)) if flat.size > 1 else math.inf
    return float(flat.mean()), stderr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 32
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eval_every: int = 250
    heldout_rounds: int = 4
    # Abort when the smoothed loss exceeds this multiple of its starting value.
    divergence_factor: float = 10.0
    log_every: int = 25


def train_backbone(params: BackboneParams, train_xs: np.ndarray, heldout_xs: np.ndarray,
                   prompt_len: int, cfg: TrainConfig, rng: np.random.Generator,
                   log_path=None,
                   em_eval: Callable[[BackboneParams], float] | None = None,
                   schedule: NoiseSchedule | None = None) -> dict:
    """AdamW training on the Monte Carlo NELBO objective.

    Writes a CSV log (step, train_loss, heldout_nelbo, exact_match; the
    latter two only on eval rows) when ``log_path`` is given. ``em_eval``
    optionally computes an exact-match rate on held-out prompts at eval
    points. Raises TrainingError on divergence or non-finite loss, naming the
    offending step. Returns a history dict with the logged rows and timing.
    """
    schedule = schedule or NoiseSchedule()
    train_xs = np.asarray(train_xs, dtype=np.int64)
    opt = AdamW(params.blocks, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = train_xs.shape[0]
    log.info("training backbone: %d params, %d sequences, %d steps",
             params.num_params, n, cfg.steps)
    rows = []
    ema = None
    ema0 = None
    t_start = _time.monotonic()
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        loss, grads = loss_and_grad(params, train_xs[idx], prompt_len, rng, schedule)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss at step {step}")
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if ema0 is None and step >= 10:
            ema0 = ema
        if ema0 is not None and ema > cfg.divergence_factor * max(ema0, 1.0):
            raise TrainingError(
                f"training diverged at step {step}: smoothed loss {ema:.3g} vs "
                f"initial {ema0:.3g}"
            )
        opt.step(grads)
        params.bump()
        is_eval = step % cfg.eval_every == 0 or step == cfg.steps
        row = {"step": step, "train_loss": loss, "heldout_nelbo": "", "exact_match": ""}
        if is_eval:
            hv, _ = heldout_nelbo(params, heldout_xs, prompt_len, rng,
                                  rounds=cfg.heldout_rounds, schedule=schedule)
            row["heldout_nelbo"] = hv
            if em_eval is not None:
                row["exact_match"] = em_eval(params)
            log.info("step %d: train %.4f heldout %.4f em %s",
                     step, loss, hv, row["exact_match"])
        if is_eval or step % cfg.log_every == 0 or step == 1:
            rows.append(row)
    elapsed = _time.monotonic() - t_start
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "train_loss",
                                                    "heldout_nelbo", "exact_match"])
            writer.writeheader()
            writer.writerows(rows)
    return {"rows": rows, "seconds": elapsed, "final_loss": ema}
