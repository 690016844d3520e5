"""Decode-path tests: allocation oracles, EOS annealing, strategy selection,
and engine invariants over real and synthetic predictors."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdlab.backbone import BackboneConfig, PredictionGrid, init_params, predict
from mdlab.decode import (
    EOS_ID,
    DecodeConfig,
    LateOverride,
    SemiAR,
    Strategy,
    TokenMode,
    TokenSchedule,
    Trajectory,
    allocate_tokens,
    decode,
    eos_lambda,
    ranking_distribution,
    select_positions,
    select_tokens,
    semi_ar_decode,
)
from mdlab.diffusion import MASK_ID
from mdlab.errors import ConfigError, IntegrityError, ScheduleError
from mdlab.nnops import softmax_last


def reference_progressive(w, v, T, L):
    """Independent largest-remainder apportionment in exact rational arithmetic."""
    residual = L - w * T
    weights = [Fraction(d, T) ** v if v == int(v) else None for d in range(1, T + 1)]
    assert all(x is not None for x in weights), "rational reference needs integer v"
    total = sum(weights)
    quotas = [residual * wt / total for wt in weights]
    shares = [int(q) for q in quotas]
    leftover = residual - sum(shares)
    fracs = sorted(range(T), key=lambda i: (quotas[i] - shares[i], i), reverse=True)
    for i in fracs[:leftover]:
        shares[i] += 1
    return np.array([w + s for s in shares])


class TestAllocateTokens:
    def test_linear_even_split(self):
        assert allocate_tokens(TokenSchedule("linear"), 4, 8).tolist() == [2, 2, 2, 2]

    def test_linear_remainder_to_early_steps(self):
        assert allocate_tokens(TokenSchedule("linear"), 4, 10).tolist() == [3, 3, 2, 2]

    def test_linear_infeasible(self):
        with pytest.raises(ScheduleError):
            allocate_tokens(TokenSchedule("linear"), 9, 8)

    def test_progressive_paper_scale_budget(self):
        # frozen oracle: w=3, v=1, T=32, L=256 starts smaller than the even
        # split L/T = 8
        counts = allocate_tokens(TokenSchedule("progressive", w=3, v=1.0), 32, 256)
        assert counts.sum() == 256
        assert counts[0] == 3
        assert counts[0] < 256 // 32
        assert np.array_equal(counts, reference_progressive(3, 1, 32, 256))

    @pytest.mark.parametrize("w,v,T,L", [(1, 1, 4, 16), (2, 2, 5, 30), (3, 1, 8, 40),
                                         (1, 0, 6, 18), (1, 1, 8, 16)])
    def test_progressive_matches_rational_reference(self, w, v, T, L):
        counts = allocate_tokens(TokenSchedule("progressive", w=w, v=float(v)), T, L)
        assert np.array_equal(counts, reference_progressive(w, v, T, L))

    def test_progressive_infeasible(self):
        with pytest.raises(ScheduleError):
            allocate_tokens(TokenSchedule("progressive", w=3), 8, 16)

    @given(T=st.integers(1, 40), extra=st.integers(0, 60))
    @settings(max_examples=80, deadline=None)
    def test_linear_properties(self, T, extra):
        L = T + extra
        counts = allocate_tokens(TokenSchedule("linear"), T, L)
        assert counts.sum() == L
        assert counts.min() >= 1
        assert counts.max() - counts.min() <= 1
        # remainder goes to the earliest steps
        assert np.all(np.diff(counts) <= 0)

    @given(w=st.integers(1, 4), v=st.floats(0.0, 3.0), T=st.integers(1, 24),
           extra=st.integers(0, 50))
    @settings(max_examples=80, deadline=None)
    def test_progressive_properties(self, w, v, T, extra):
        L = w * T + extra
        counts = allocate_tokens(TokenSchedule("progressive", w=w, v=v), T, L)
        assert counts.sum() == L
        assert counts.min() >= w
        # budgets never shrink as decoding advances
        assert np.all(np.diff(counts) >= 0)


class TestEosLambda:
    def test_linear_anneal_values(self):
        assert eos_lambda(16, 16, 3.0) == 1.0
        assert eos_lambda(8, 16, 3.0) == pytest.approx(2.0)
        assert eos_lambda(4, 16, 3.0) == pytest.approx(2.5)

    def test_unit_init_is_identity(self):
        for d in range(1, 9):
            assert eos_lambda(d, 8, 1.0) == 1.0

    def test_step_domain(self):
        with pytest.raises(ConfigError):
            eos_lambda(0, 8, 3.0)
        with pytest.raises(ConfigError):
            eos_lambda(9, 8, 3.0)


class TestRankingDistribution:
    def test_lambda_one_bit_identical(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 9))
        logits[:, MASK_ID] = -np.inf
        assert np.array_equal(ranking_distribution(logits, 1.0), softmax_last(logits))

    def test_only_eos_column_rescaled(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 7)) + 3.0
        logits[:, MASK_ID] = -np.inf
        base = softmax_last(logits)
        annealed = ranking_distribution(logits, 3.0)
        assert np.all(annealed[:, MASK_ID] == 0.0)
        assert np.allclose(annealed.sum(axis=1), 1.0)
        # positive EOS logits shrink under division, so EOS mass drops
        assert np.all(annealed[:, EOS_ID] < base[:, EOS_ID])

    def test_raw_logits_untouched(self):
        logits = np.ones((2, 4))
        before = logits.copy()
        ranking_distribution(logits, 2.0)
        assert np.array_equal(logits, before)


def grid_from_probs(probs):
    logits = np.log(np.where(probs > 0, probs, 1e-300))
    logits[:, MASK_ID] = -np.inf
    return PredictionGrid(probs=probs, logits=logits, hidden=np.zeros((probs.shape[0], 4)))


def uniform_rank(n_pos, v):
    probs = np.full((n_pos, v), 1.0 / (v - 1))
    probs[:, MASK_ID] = 0.0
    return probs


class TestSelectPositions:
    def test_top1_picks_highest_confidence(self):
        probs = uniform_rank(5, 6)
        probs[2] = [0, 0.9, 0.05, 0.05, 0, 0]
        probs[4] = [0, 0.7, 0.1, 0.1, 0.1, 0]
        masked = np.arange(5)
        got = select_positions(Strategy("top1_confidence"), probs, masked, 2, 1,
                               np.random.default_rng(0))
        assert got.tolist() == [2, 4]

    def test_top1_ties_break_low_index(self):
        probs = uniform_rank(6, 5)
        masked = np.arange(6)
        got = select_positions(Strategy("top1_confidence"), probs, masked, 3, 2,
                               np.random.default_rng(0))
        assert got.tolist() == [0, 1, 2]

    def test_margin_differs_from_top1(self):
        # position 0: highest max but tiny margin; position 1: lower max, big margin
        probs = np.array([
            [0.0, 0.48, 0.46, 0.06],
            [0.0, 0.44, 0.28, 0.28],
            [0.0, 0.40, 0.35, 0.25],
        ])
        masked = np.arange(3)
        top1 = select_positions(Strategy("top1_confidence"), probs, masked, 1, 1,
                                np.random.default_rng(0))
        margin = select_positions(Strategy("probability_margin"), probs, masked, 1, 1,
                                  np.random.default_rng(0))
        assert top1.tolist() == [0]
        assert margin.tolist() == [1]

    def test_ancestral_uniform_over_masked(self):
        rng = np.random.default_rng(7)
        probs = uniform_rank(8, 5)
        masked = np.array([1, 3, 4, 6])
        hits = np.zeros(8)
        for _ in range(4000):
            got = select_positions(Strategy("ancestral"), probs, masked, 1, 3, rng)
            hits[got[0]] += 1
        assert np.all(hits[[0, 2, 5, 7]] == 0)
        freq = hits[masked] / 4000
        assert np.all(np.abs(freq - 0.25) < 0.035)

    def test_random_initial_random_only_at_step_one(self):
        probs = uniform_rank(5, 6)
        probs[3] = [0, 0.9, 0.025, 0.025, 0.025, 0.025]
        masked = np.arange(5)
        later = select_positions(Strategy("random_initial"), probs, masked, 1, 2,
                                 np.random.default_rng(0))
        top1 = select_positions(Strategy("top1_confidence"), probs, masked, 1, 2,
                                np.random.default_rng(0))
        assert np.array_equal(later, top1)
        first_draws = {
            int(select_positions(Strategy("random_initial"), probs, masked, 1, 1,
                                 np.random.default_rng(s))[0])
            for s in range(40)
        }
        assert len(first_draws) > 1  # not pinned to the confidence argmax

    def test_delayed_random_fires_at_d0(self):
        probs = uniform_rank(5, 6)
        probs[3] = [0, 0.9, 0.025, 0.025, 0.025, 0.025]
        masked = np.arange(5)
        strat = Strategy("delayed_random", d0=4)
        at_d0 = {
            int(select_positions(strat, probs, masked, 1, 4,
                                 np.random.default_rng(s))[0])
            for s in range(40)
        }
        assert len(at_d0) > 1
        before = select_positions(strat, probs, masked, 1, 3, np.random.default_rng(0))
        assert before.tolist() == [3]

    def test_planner_delegates_step_one(self):
        probs = uniform_rank(6, 5)
        masked = np.arange(6)
        calls = []

        def plan(grid, masked_arg, n, rng):
            calls.append(n)
            return np.array([5, 1])

        got = select_positions(Strategy("planner_guided"), probs, masked, 2, 1,
                               np.random.default_rng(0), plan_initial=plan,
                               grid=grid_from_probs(probs))
        assert got.tolist() == [1, 5]
        assert calls == [2]

    def test_planner_missing_errors(self):
        probs = uniform_rank(4, 5)
        with pytest.raises(ConfigError):
            select_positions(Strategy("planner_guided"), probs, np.arange(4), 1, 1,
                             np.random.default_rng(0))

    def test_overdraw_errors(self):
        probs = uniform_rank(3, 5)
        with pytest.raises(ScheduleError):
            select_positions(Strategy("top1_confidence"), probs, np.arange(2), 3, 1,
                             np.random.default_rng(0))


class TestSelectTokens:
    def test_greedy_is_argmax_and_never_mask(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(7, 6))
        logits[:, MASK_ID] = -np.inf
        toks = select_tokens(logits, np.arange(7), TokenMode("greedy"), rng)
        assert np.array_equal(toks, logits.argmax(axis=1))
        assert np.all(toks != MASK_ID)

    def test_temperature_near_zero_is_greedy(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 6))
        logits[:, MASK_ID] = -np.inf
        toks = select_tokens(logits, np.arange(5), TokenMode("temperature", tau=1e-3),
                             np.random.default_rng(0))
        assert np.array_equal(toks, logits.argmax(axis=1))

    def test_temperature_sampling_varies_and_replays(self):
        logits = np.zeros((4, 5))
        logits[:, MASK_ID] = -np.inf
        a = select_tokens(logits, np.arange(4), TokenMode("temperature", tau=0.9),
                          np.random.default_rng(11))
        b = select_tokens(logits, np.arange(4), TokenMode("temperature", tau=0.9),
                          np.random.default_rng(11))
        c = select_tokens(logits, np.arange(4), TokenMode("temperature", tau=0.9),
                          np.random.default_rng(12))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.all(a != MASK_ID)


# ---------------------------------------------------------------------------
# engine tests on a tiny real backbone


@pytest.fixture(scope="module")
def toy_model():
    cfg = BackboneConfig(vocab_size=10, max_len=20, embed_dim=16, n_layers=2,
                         n_heads=2, hidden_dim=24)
    params = init_params(cfg, np.random.default_rng(5))
    return params


def predictor(params):
    return lambda state: predict(params, state)


PROMPT = np.array([2, 3, 4, 5])


def base_cfg(**over):
    kw = dict(T=4, L=8, schedule=TokenSchedule("linear"),
              strategy=Strategy("top1_confidence"), token_mode=TokenMode("greedy"),
              eos_lambda_init=None)
    kw.update(over)
    return DecodeConfig(**kw)


class TestDecodeEngine:
    def test_trajectory_structure(self, toy_model):
        traj = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(0))
        traj.validate()
        assert traj.T == 4
        assert all(len(rec.positions) == 2 for rec in traj.steps)
        assert np.all(traj.final_window != MASK_ID)

    def test_one_predict_call_per_step(self, toy_model):
        calls = []

        def counting(state):
            calls.append(state.tokens.copy())
            return predict(toy_model, state)

        decode(counting, PROMPT, base_cfg(), np.random.default_rng(0))
        assert len(calls) == 4

    def test_monotone_mask_shrinkage(self, toy_model):
        calls = []

        def counting(state):
            calls.append(int(np.sum(state.tokens == MASK_ID)))
            return predict(toy_model, state)

        traj = decode(counting, PROMPT, base_cfg(), np.random.default_rng(0))
        expect = [8, 6, 4, 2]
        assert calls == expect
        traj.validate()

    def test_unit_lambda_bit_identical_to_disabled(self, toy_model):
        a = decode(predictor(toy_model), PROMPT, base_cfg(eos_lambda_init=None),
                   np.random.default_rng(42))
        b = decode(predictor(toy_model), PROMPT, base_cfg(eos_lambda_init=1.0),
                   np.random.default_rng(42))
        assert [r.positions for r in a.steps] == [r.positions for r in b.steps]
        assert [r.tokens for r in a.steps] == [r.tokens for r in b.steps]
        assert np.array_equal(a.final_window, b.final_window)
        for ra, rb in zip(a.steps, b.steps):
            assert np.array_equal(ra.top1_probs, rb.top1_probs)

    def test_ranking_commit_separation_under_annealing(self, toy_model):
        # greedy commits must equal the raw argmax snapshot even when the
        # annealed ranking disagrees with the raw ranking
        traj = decode(predictor(toy_model), PROMPT, base_cfg(eos_lambda_init=3.0),
                      np.random.default_rng(1))
        for rec in traj.steps:
            for p, tok in zip(rec.positions, rec.tokens):
                assert tok == rec.top1_tokens[p]

    def test_deterministic_given_seed(self, toy_model):
        cfg = base_cfg(strategy=Strategy("ancestral"),
                       token_mode=TokenMode("temperature", tau=0.9))
        a = decode(predictor(toy_model), PROMPT, cfg, np.random.default_rng(9))
        b = decode(predictor(toy_model), PROMPT, cfg, np.random.default_rng(9))
        assert [r.positions for r in a.steps] == [r.positions for r in b.steps]
        assert [r.tokens for r in a.steps] == [r.tokens for r in b.steps]

    def test_forced_prefix_replays_exactly(self, toy_model):
        orig = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(3))
        forced = [rec.positions for rec in orig.steps[:2]]
        replay = decode(predictor(toy_model), PROMPT, base_cfg(),
                        np.random.default_rng(3), forced_positions=forced)
        assert [r.positions for r in replay.steps] == [r.positions for r in orig.steps]
        assert np.array_equal(replay.final_window, orig.final_window)

    def test_forced_invalid_positions_rejected(self, toy_model):
        with pytest.raises(IntegrityError):
            decode(predictor(toy_model), PROMPT, base_cfg(),
                   np.random.default_rng(3),
                   forced_positions=[(0, 1), (0, 2)])  # 0 recommitted

    def test_late_override_switches_token_mode(self, toy_model):
        override = LateOverride(after_step=2, strategy=Strategy("ancestral"),
                                token_mode=TokenMode("temperature", tau=5.0))
        a = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(8),
                   late_override=override)
        b = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(8))
        assert [r.positions for r in a.steps[:2]] == [r.positions for r in b.steps[:2]]
        assert [r.tokens for r in a.steps[:2]] == [r.tokens for r in b.steps[:2]]
        assert [r.positions for r in a.steps[2:]] != [r.positions for r in b.steps[2:]] or \
            [r.tokens for r in a.steps[2:]] != [r.tokens for r in b.steps[2:]]

    def test_planner_strategy_consumes_hook(self, toy_model):
        def plan(grid, masked, n, rng):
            assert masked.size == 8
            return np.array(range(n))

        cfg = base_cfg(strategy=Strategy("planner_guided", pool_size=4))
        traj = decode(predictor(toy_model), PROMPT, cfg, np.random.default_rng(0),
                      plan_initial=plan)
        assert traj.steps[0].positions == (0, 1)
        traj.validate()


class TestSemiAR:
    def test_full_block_reduces_to_nar(self, toy_model):
        cfg = base_cfg()
        nar = decode(predictor(toy_model), PROMPT, cfg, np.random.default_rng(21))
        sar = semi_ar_decode(predictor(toy_model), PROMPT, cfg,
                             SemiAR(block_length=8, steps_per_block=4),
                             np.random.default_rng(21))
        assert [r.positions for r in nar.steps] == [r.positions for r in sar.steps]
        assert [r.tokens for r in nar.steps] == [r.tokens for r in sar.steps]
        assert np.array_equal(nar.final_window, sar.final_window)

    def test_blocks_decode_left_to_right(self, toy_model):
        cfg = base_cfg(T=2, L=8)
        traj = semi_ar_decode(predictor(toy_model), PROMPT, cfg,
                              SemiAR(block_length=2, steps_per_block=2),
                              np.random.default_rng(2))
        traj.validate()
        assert traj.T == 8
        for i, rec in enumerate(traj.steps):
            block = i // 2
            assert all(2 * block <= p < 2 * (block + 1) for p in rec.positions)

    def test_indivisible_block_rejected(self, toy_model):
        with pytest.raises(ScheduleError):
            semi_ar_decode(predictor(toy_model), PROMPT, base_cfg(),
                           SemiAR(block_length=3, steps_per_block=1),
                           np.random.default_rng(0))

    def test_ar_like_one_token_blocks(self, toy_model):
        cfg = base_cfg(T=1, L=8)
        traj = semi_ar_decode(predictor(toy_model), PROMPT, cfg,
                              SemiAR(block_length=1, steps_per_block=1),
                              np.random.default_rng(4))
        traj.validate()
        assert [r.positions for r in traj.steps] == [(p,) for p in range(8)]


class TestTrajectoryValidate:
    def test_detects_recommit(self, toy_model):
        traj = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(0))
        traj.steps[1] = StepRecordCopy(traj.steps[1], positions=traj.steps[0].positions)
        with pytest.raises(IntegrityError):
            traj.validate()

    def test_detects_incomplete(self, toy_model):
        traj = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(0))
        traj.steps = traj.steps[:-1]
        with pytest.raises(IntegrityError):
            traj.validate()

    def test_detects_final_mismatch(self, toy_model):
        traj = decode(predictor(toy_model), PROMPT, base_cfg(), np.random.default_rng(0))
        traj.final_window = traj.final_window.copy()
        traj.final_window[0] = (traj.final_window[0] % 8) + 1
        with pytest.raises(IntegrityError):
            traj.validate()


def StepRecordCopy(rec, **over):
    from dataclasses import replace

    return replace(rec, **over)


class TestConfigValidation:
    def test_rejects_unknown_strategy(self):
        with pytest.raises(ConfigError):
            Strategy("mystery")

    def test_delayed_random_needs_d0(self):
        with pytest.raises(ConfigError):
            Strategy("delayed_random")

    def test_d0_within_horizon(self):
        with pytest.raises(ConfigError):
            base_cfg(strategy=Strategy("delayed_random", d0=9))

    def test_lambda_below_one_rejected(self):
        with pytest.raises(ConfigError):
            base_cfg(eos_lambda_init=0.5)

    def test_roundtrip(self):
        cfg = base_cfg(strategy=Strategy("delayed_random", d0=3),
                       eos_lambda_init=2.5)
        assert DecodeConfig.from_dict(cfg.to_dict()) == cfg
