"""Session fixtures: trained toy rigs shared by the CLI and acceptance tests.

Each rig is trained at most once per session and only when a test actually
asks for it, so the fast unit-test loop never pays for the expensive ones.
"""

import dataclasses

import numpy as np
import pytest

from mdlab import checkpoint
from mdlab.backbone import (BackboneConfig, TrainConfig, init_params, predict,
                            train_backbone)
from mdlab.rng import derive_rng
from mdlab.tasks import TaskConfig, generate_suite, reward, save_suite


@dataclasses.dataclass
class Rig:
    """A trained backbone plus its task suite and on-disk artifacts."""

    suite: object
    params: object
    tasks_path: str
    ckpt_path: str
    train_result: dict

    def predict(self, state):
        return predict(self.params, state)

    def reward_fn(self):
        return lambda inst, window: reward(inst, window, self.suite.vocab)


def build_rig(tmp, task_cfg, suite_seed, rig_seed, train_cfg):
    suite = generate_suite(task_cfg, seed=suite_seed)
    bcfg = BackboneConfig(vocab_size=len(suite.vocab.tokens),
                          max_len=suite.prompt_len + suite.gen_len)
    params = init_params(bcfg, derive_rng(rig_seed, "init"))
    tr_p, tr_w = suite.arrays("train")
    te_p, te_w = suite.arrays("test")
    xs = np.concatenate([tr_p, tr_w], axis=1)
    xs_heldout = np.concatenate([te_p, te_w], axis=1)
    result = train_backbone(params, xs, xs_heldout, suite.prompt_len,
                            train_cfg, derive_rng(rig_seed, "train"))
    tasks_path = tmp / "tasks.jsonl"
    ckpt_path = tmp / "backbone.ckpt"
    save_suite(suite, tasks_path)
    checkpoint.save_backbone(params, ckpt_path)
    return Rig(suite=suite, params=params, tasks_path=str(tasks_path),
               ckpt_path=str(ckpt_path), train_result=result)


@pytest.fixture(scope="session")
def weak_rig(tmp_path_factory):
    """Deliberately undertrained copy model (~10s of training).

    Greedy decoding lands mid-range on exact match, so rollouts carry both
    successes and failures; the planner pipeline needs that label mix.
    """
    return build_rig(
        tmp_path_factory.mktemp("weak_rig"),
        TaskConfig(kind="copy", count=120, gen_len=16), 11, 7,
        TrainConfig(steps=150, batch_size=32, lr=1e-3, eval_every=1_000_000,
                    heldout_rounds=2),
    )


@pytest.fixture(scope="session")
def copy_rig(tmp_path_factory):
    """Copy task trained until held-out exact match saturates (~1 min)."""
    return build_rig(
        tmp_path_factory.mktemp("copy_rig"),
        TaskConfig(kind="copy", count=300, gen_len=16), 101, 7,
        TrainConfig(steps=1500, batch_size=32, lr=1e-3, eval_every=500,
                    heldout_rounds=2),
    )


@pytest.fixture(scope="session")
def modsum_rig(tmp_path_factory):
    """Prefix-sum chains at the budget that clears 0.60 exact match (~6 min)."""
    return build_rig(
        tmp_path_factory.mktemp("modsum_rig"),
        TaskConfig(kind="modsum_chain", count=2000, gen_len=16), 202, 8,
        TrainConfig(steps=12000, batch_size=32, lr=5e-4, eval_every=3000,
                    heldout_rounds=2),
    )
