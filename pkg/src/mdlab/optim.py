"""Decoupled-weight-decay Adam for flat parameter dicts."""

from __future__ import annotations

import numpy as np


class AdamW:
    """AdamW over a dict of float64 arrays, updating in place.

    Weight decay is decoupled and applied only to 2-D weight matrices outside
    the embedding tables; biases, layernorm gains, and embeddings follow the
    common no-decay convention.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _decays(self, key: str, arr: np.ndarray) -> bool:
        return arr.ndim == 2 and not key.startswith("embed.")

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self._decays(k, p):
                update = update + self.weight_decay * p
            p -= self.lr * update
