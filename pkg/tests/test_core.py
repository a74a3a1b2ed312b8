import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itap.core import (
    Chunk,
    ContextWindow,
    Episode,
    MaskSpec,
    apply_token_mask,
    compute_macro_return,
    compute_return_to_go,
    sample_training_chunk,
    segment_episode,
    slide_context,
    zero_token,
)
from helpers import random_tokens


def summation_oracle(rewards, gamma):
    """Independent power-series evaluation of the discounted suffix sums."""
    n = len(rewards)
    return [sum(gamma ** (i - t) * rewards[i] for i in range(t, n)) for t in range(n)]


class TestReturnToGo:
    def test_undiscounted(self):
        assert compute_return_to_go([1, 1, 1], 1.0).tolist() == [3, 2, 1]

    def test_discounted_matches_oracle(self):
        got = compute_return_to_go([1, 1, 1], 0.99)
        assert np.allclose(got, [2.9701, 1.99, 1.0], atol=1e-12)
        assert np.allclose(got, summation_oracle([1, 1, 1], 0.99), atol=1e-12)

    def test_empty(self):
        assert compute_return_to_go([], 0.5).size == 0

    @given(
        st.lists(st.floats(-10, 10), min_size=1, max_size=40),
        st.floats(0.0, 0.999),
    )
    @settings(max_examples=60, deadline=None)
    def test_recursion_identity(self, rewards, gamma):
        g = compute_return_to_go(rewards, gamma)
        for t in range(len(rewards) - 1):
            lhs = g[t]
            rhs = rewards[t] + gamma * g[t + 1]
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(rhs))


class TestMacroReturn:
    def test_plain_sum(self):
        assert compute_macro_return([1, 1, 1], 1.0) == 3

    def test_discounted(self):
        assert compute_macro_return([0, 0, 5], 0.9) == pytest.approx(4.05)

    def test_single_step(self):
        assert compute_macro_return([2], 0.37) == 2

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            compute_macro_return([], 0.9)


def constant_episode(T, obs_dim=2, act_dim=2, reward=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return Episode(
        observations=rng.standard_normal((T, obs_dim)),
        actions=rng.uniform(-1, 1, (T, act_dim)),
        rewards=np.full(T, reward),
    )


class TestSegmentEpisode:
    def test_exact_multiple(self):
        assert len(segment_episode(constant_episode(6), 3, 1.0)) == 2

    def test_remainder_dropped(self):
        toks = segment_episode(constant_episode(7), 3, 1.0)
        assert len(toks) == 2

    def test_returns_from_oracle(self):
        toks = segment_episode(constant_episode(6), 3, 1.0)
        assert [t.rtg for t in toks] == [6, 3]
        assert [t.macro_return for t in toks] == [3, 3]

    def test_empty(self):
        ep = Episode(
            observations=np.zeros((0, 2)), actions=np.zeros((0, 2)), rewards=np.zeros(0)
        )
        assert segment_episode(ep, 3, 1.0) == []

    def test_actions_reproduced_bit_exactly(self):
        ep = constant_episode(11, seed=3)
        toks = segment_episode(ep, 3, 0.99)
        rebuilt = np.concatenate([t.macro_action for t in toks])
        assert np.array_equal(rebuilt, ep.actions[:9])

    def test_rtg_over_retained_horizon_only(self):
        ep = constant_episode(7, reward=1.0)
        toks = segment_episode(ep, 3, 1.0)
        assert toks[0].rtg == 6  # step 6 dropped


class TestEpisodeInvariants:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Episode(
                observations=np.zeros((3, 2)),
                actions=np.zeros((2, 2)),
                rewards=np.zeros(3),
            )

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Episode(
                observations=np.full((2, 2), np.nan),
                actions=np.zeros((2, 2)),
                rewards=np.zeros(2),
            )


def make_chunk(n_ctx, rng=None, pad=0):
    toks = random_tokens(n_ctx + 2, rng=rng)
    if pad:
        toks = [zero_token(3, 3, 2) for _ in range(pad)] + toks[pad:]
    return Chunk(tokens=toks, context_len=n_ctx, pad_count=pad)


class TestMasking:
    def test_rule_with_context_one(self):
        chunk = make_chunk(1)
        out = apply_token_mask(chunk, MaskSpec())
        assert all(t.mask_flags.rtg and t.rtg == 0 for t in out.tokens)
        assert not out.tokens[0].mask_flags.macro_return
        assert out.tokens[1].mask_flags.macro_return and out.tokens[1].macro_return == 0
        assert out.tokens[2].mask_flags.macro_return

    def test_disabled_is_identity(self):
        chunk = make_chunk(2)
        out = apply_token_mask(chunk, MaskSpec(False, False))
        for a, b in zip(chunk.tokens, out.tokens):
            assert a.rtg == b.rtg and a.macro_return == b.macro_return

    def test_zero_context_masks_everything(self):
        chunk = make_chunk(0)
        out = apply_token_mask(chunk, MaskSpec())
        assert all(t.mask_flags.rtg and t.mask_flags.macro_return for t in out.tokens)

    def test_idempotent(self):
        chunk = make_chunk(3)
        once = apply_token_mask(chunk, MaskSpec())
        twice = apply_token_mask(once, MaskSpec())
        for a, b in zip(once.tokens, twice.tokens):
            assert a.rtg == b.rtg
            assert a.macro_return == b.macro_return
            assert a.mask_flags == b.mask_flags

    def test_observations_untouched(self):
        chunk = make_chunk(2)
        out = apply_token_mask(chunk, MaskSpec())
        for a, b in zip(chunk.tokens, out.tokens):
            assert np.array_equal(a.observation, b.observation)
            assert np.array_equal(a.macro_action, b.macro_action)

    def test_input_not_mutated(self):
        chunk = make_chunk(1)
        before = [t.rtg for t in chunk.tokens]
        apply_token_mask(chunk, MaskSpec())
        assert [t.rtg for t in chunk.tokens] == before


class TestChunkSampling:
    def test_start_uniform(self):
        toks = random_tokens(8)
        rng = np.random.default_rng(7)
        counts = np.zeros(5)
        trials = 10_000
        for _ in range(trials):
            ch = sample_training_chunk(toks, 2, rng)
            start = next(
                i for i in range(8) if toks[i].rtg == ch.tokens[0].rtg
            )
            counts[start] += 1
        p = 1 / 5
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) < 5 * sigma)

    def test_exact_fit_single_chunk(self):
        toks = random_tokens(4)
        ch = sample_training_chunk(toks, 2, np.random.default_rng(0))
        assert ch.pad_count == 0
        assert [t.rtg for t in ch.tokens] == [t.rtg for t in toks]

    def test_short_episode_padded(self):
        toks = random_tokens(3)
        ch = sample_training_chunk(toks, 4, np.random.default_rng(0))
        assert ch.pad_count == 3
        assert len(ch.tokens) == 6
        for t in ch.tokens[:3]:
            assert t.mask_flags.rtg and t.mask_flags.observation
            assert t.rtg == 0 and not t.observation.any()

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            sample_training_chunk(random_tokens(1), 2, np.random.default_rng(0))


class TestContextWindow:
    def test_append_below_capacity(self):
        w = ContextWindow(capacity=2, entries=("a",))
        assert slide_context(w, "b").entries == ("a", "b")

    def test_fifo_eviction(self):
        w = ContextWindow(capacity=2, entries=("a", "b"))
        assert slide_context(w, "c").entries == ("b", "c")

    def test_zero_capacity_stays_empty(self):
        w = ContextWindow(capacity=0)
        assert slide_context(w, "a").entries == ()
