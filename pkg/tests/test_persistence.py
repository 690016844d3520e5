"""Checkpoint container and trajectory files: round trips, digests, replay."""

import numpy as np
import pytest

from mdlab.backbone import BackboneConfig, init_params, predict
from mdlab.checkpoint import (load_backbone, load_checkpoint, load_planner,
                              params_digest, save_backbone, save_checkpoint,
                              save_planner)
from mdlab.decode import (DecodeConfig, SemiAR, Strategy, TokenMode,
                          TokenSchedule, decode)
from mdlab.errors import IntegrityError
from mdlab.planner import PlannerConfig, init_planner
from mdlab.rng import derive_rng
from mdlab.trajio import load_trajectory_file, replay_trajectory, save_trajectory

BCFG = BackboneConfig(vocab_size=10, max_len=16, embed_dim=8, n_layers=1,
                      n_heads=2, hidden_dim=12)


def backbone(seed=0):
    return init_params(BCFG, np.random.default_rng(seed))


class TestCheckpoint:
    def test_backbone_roundtrip_bit_identical(self, tmp_path):
        params = backbone()
        save_backbone(params, tmp_path / "b.ckpt")
        back = load_backbone(tmp_path / "b.ckpt")
        assert back.config == params.config
        assert set(back.blocks) == set(params.blocks)
        for k in params.blocks:
            assert np.array_equal(back.blocks[k], params.blocks[k])
            assert back.blocks[k].dtype == np.float64

    def test_loaded_blocks_are_writable(self, tmp_path):
        params = backbone()
        save_backbone(params, tmp_path / "b.ckpt")
        back = load_backbone(tmp_path / "b.ckpt")
        back.blocks["head.b"][0] = 7.0  # must not raise

    def test_planner_roundtrip_keeps_meta(self, tmp_path):
        cfg = PlannerConfig(feature_dim=8, d_model=16, n_layers=1, n_heads=2,
                            ffn_dim=24, pos_dim=4, max_positions=12)
        params = init_planner(cfg, np.random.default_rng(1))
        params.meta = {"trained_set_size": 3, "val_rerank": 0.5}
        save_planner(params, tmp_path / "p.ckpt")
        back = load_planner(tmp_path / "p.ckpt")
        assert back.config == cfg
        assert back.meta["trained_set_size"] == 3
        for k in params.blocks:
            assert np.array_equal(back.blocks[k], params.blocks[k])

    def test_save_is_deterministic(self, tmp_path):
        params = backbone()
        save_backbone(params, tmp_path / "a.ckpt")
        save_backbone(params, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_payload_tamper_detected(self, tmp_path):
        save_backbone(backbone(), tmp_path / "b.ckpt")
        raw = bytearray((tmp_path / "b.ckpt").read_bytes())
        raw[-100] ^= 0x01
        (tmp_path / "b.ckpt").write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="digest"):
            load_backbone(tmp_path / "b.ckpt")

    def test_truncation_detected(self, tmp_path):
        save_backbone(backbone(), tmp_path / "b.ckpt")
        raw = (tmp_path / "b.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(raw[:-10])
        with pytest.raises(IntegrityError):
            load_backbone(tmp_path / "b.ckpt")

    def test_wrong_kind_rejected(self, tmp_path):
        save_backbone(backbone(), tmp_path / "b.ckpt")
        with pytest.raises(IntegrityError, match="kind|expected"):
            load_planner(tmp_path / "b.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world, definitely not params")
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_load_reports_param_count(self, tmp_path, caplog):
        params = backbone()
        save_backbone(params, tmp_path / "b.ckpt")
        with caplog.at_level("INFO"):
            load_backbone(tmp_path / "b.ckpt")
        assert str(params.num_params) in caplog.text

    def test_generic_container_roundtrip(self, tmp_path):
        blocks = {"a": np.arange(6, dtype=np.float64).reshape(2, 3),
                  "b": np.array([1.5])}
        save_checkpoint(tmp_path / "g.ckpt", "backbone", {"x": 1}, blocks,
                        meta={"note": "fixture"})
        kind, config, got, meta = load_checkpoint(tmp_path / "g.ckpt")
        assert kind == "backbone" and config == {"x": 1} and meta == {"note": "fixture"}
        assert np.array_equal(got["a"], blocks["a"])


class TestParamsDigest:
    def test_insensitive_to_dict_order(self):
        a = {"x": np.ones(3), "y": np.zeros(2)}
        b = {"y": np.zeros(2), "x": np.ones(3)}
        assert params_digest(a) == params_digest(b)

    def test_sensitive_to_values_and_shapes(self):
        a = {"x": np.ones(4)}
        b = {"x": np.ones(4)}
        b["x"][2] = 1.0000000001
        assert params_digest(a) != params_digest(b)
        c = {"x": np.ones((2, 2))}
        assert params_digest(a) != params_digest(c)


# ---------------------------------------------------------------------------
# trajectory files


def decode_cfg(**over):
    kw = dict(T=4, L=8, schedule=TokenSchedule("linear"),
              strategy=Strategy("top1_confidence"), token_mode=TokenMode("greedy"),
              eos_lambda_init=None)
    kw.update(over)
    return DecodeConfig(**kw)


PROMPT = np.array([2, 3, 4])


class TestTrajectoryFiles:
    def run_one(self, cfg=None, seed_words=("t",)):
        params = backbone(3)
        fn = lambda s: predict(params, s)
        traj = decode(fn, PROMPT, cfg or decode_cfg(), derive_rng(11, *seed_words))
        return params, fn, traj

    def test_roundtrip_and_replay(self, tmp_path):
        params, fn, traj = self.run_one()
        save_trajectory(traj, tmp_path / "t.jsonl", seed_path=[11, "t"],
                        instance_id="i0")
        tf = load_trajectory_file(tmp_path / "t.jsonl")
        assert tf.instance_id == "i0"
        assert np.array_equal(tf.prompt, traj.prompt)
        replayed = replay_trajectory(fn, tf)
        assert np.array_equal(replayed.final_window, traj.final_window)
        for a, b in zip(replayed.steps, traj.steps):
            assert a.positions == b.positions and a.tokens == b.tokens
            assert np.array_equal(a.top1_probs, b.top1_probs)

    def test_files_byte_identical_across_reruns(self, tmp_path):
        _, _, t1 = self.run_one()
        _, _, t2 = self.run_one()
        save_trajectory(t1, tmp_path / "a.jsonl", seed_path=[11, "t"], instance_id="x")
        save_trajectory(t2, tmp_path / "b.jsonl", seed_path=[11, "t"], instance_id="x")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_lambda_one_and_none_write_identical_files(self, tmp_path):
        _, _, t_none = self.run_one(decode_cfg(eos_lambda_init=None))
        _, _, t_one = self.run_one(decode_cfg(eos_lambda_init=1.0))
        save_trajectory(t_none, tmp_path / "n.jsonl", instance_id="x")
        save_trajectory(t_one, tmp_path / "o.jsonl", instance_id="x")
        assert (tmp_path / "n.jsonl").read_bytes() == (tmp_path / "o.jsonl").read_bytes()

    def test_semi_ar_and_annealed_replay(self, tmp_path):
        params, fn, _ = self.run_one()
        cfg = decode_cfg(eos_lambda_init=3.0)
        traj = decode(fn, PROMPT, cfg, derive_rng(12, "s"),
                      semi_ar=SemiAR(block_length=4, steps_per_block=2))
        save_trajectory(traj, tmp_path / "s.jsonl")
        replayed = replay_trajectory(fn, load_trajectory_file(tmp_path / "s.jsonl"))
        assert np.array_equal(replayed.final_window, traj.final_window)
        for a, b in zip(replayed.steps, traj.steps):
            assert np.array_equal(a.rank_top1_tokens, b.rank_top1_tokens)

    def test_wrong_model_rejected(self, tmp_path):
        _, fn, traj = self.run_one()
        save_trajectory(traj, tmp_path / "t.jsonl")
        other = backbone(99)
        with pytest.raises(IntegrityError, match="snapshot"):
            replay_trajectory(lambda s: predict(other, s),
                              load_trajectory_file(tmp_path / "t.jsonl"))

    def test_edited_tokens_rejected(self, tmp_path):
        import json

        _, fn, traj = self.run_one()
        save_trajectory(traj, tmp_path / "t.jsonl")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        rec = json.loads(lines[2])
        rec["tokens"][0] = (rec["tokens"][0] % 9) + 1  # still a legal non-mask id
        lines[2] = json.dumps(rec, sort_keys=True)
        (tmp_path / "t.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(IntegrityError):
            replay_trajectory(fn, load_trajectory_file(tmp_path / "t.jsonl"))

    def test_truncated_file_rejected(self, tmp_path):
        _, fn, traj = self.run_one()
        save_trajectory(traj, tmp_path / "t.jsonl")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        (tmp_path / "t.jsonl").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(IntegrityError, match="step"):
            load_trajectory_file(tmp_path / "t.jsonl")

    def test_temperature_trajectory_replayable(self, tmp_path):
        """Replay never re-samples: recorded commits are applied as data, so
        stochastic token modes replay exactly like greedy ones."""
        params, fn, _ = self.run_one()
        cfg = decode_cfg(strategy=Strategy("random_initial"),
                         token_mode=TokenMode("temperature", tau=0.9))
        traj = decode(fn, PROMPT, cfg, derive_rng(13, "tmp"))
        save_trajectory(traj, tmp_path / "t.jsonl")
        replayed = replay_trajectory(fn, load_trajectory_file(tmp_path / "t.jsonl"))
        for a, b in zip(replayed.steps, traj.steps):
            assert a.tokens == b.tokens
