import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import itap.diffmath as dm
from itap.core import Chunk, MaskSpec, apply_token_mask, zero_token
from itap.rqvae import (
    Codebook,
    CodeStack,
    FieldStats,
    TokenBatch,
    decode_chunk,
    encode_chunk,
    encode_history_to_codes,
    ema_codebook_update,
    fit_codebook,
    quantize_rows,
    residual_quantize,
    rqvae_loss,
    stack_latent,
    straight_through,
)
from helpers import random_tokens, tiny_rqvae


def brute_force_quantize(z, entries, depth):
    """Exhaustive per-depth nearest neighbor, lowest index on ties."""
    residual = np.asarray(z, dtype=np.float32).copy()
    indices, acc = [], np.zeros_like(residual)
    for _ in range(depth):
        best_k, best_d = 0, None
        for k in range(len(entries)):
            d = float(((residual - entries[k]) ** 2).sum())
            if best_d is None or d < best_d - 1e-12:
                best_k, best_d = k, d
        indices.append(best_k)
        acc = acc + entries[best_k]
        residual = residual - entries[best_k]
    return indices, acc, residual


def make_codebook(entries):
    entries = np.asarray(entries, dtype=np.float32)
    return Codebook(
        entries=entries,
        ema_cluster_size=np.ones(len(entries)),
        ema_embed_sum=entries.astype(np.float64).copy(),
    )


class TestResidualQuantize:
    def test_scalar_example(self):
        cb = make_codebook([[-1.0], [0.0], [1.0]])
        q = residual_quantize(np.array([0.7]), cb, 2)
        assert q.stack.indices == (2, 1)  # entry values 1 then 0
        assert q.partial_sums.ravel().tolist() == [1.0, 1.0]
        assert q.final_residual[0] == pytest.approx(-0.3, abs=1e-7)

    def test_exact_entry_match(self):
        rng = np.random.default_rng(0)
        entries = rng.standard_normal((5, 4))
        cb = make_codebook(entries)
        q = residual_quantize(entries[3], cb, 1)
        assert q.stack.indices == (3,)
        assert np.allclose(q.final, entries[3].astype(np.float32))
        assert np.allclose(q.final_residual, 0, atol=1e-7)

    def test_zero_entry_absorbs_deep_levels(self):
        rng = np.random.default_rng(1)
        entries = rng.standard_normal((4, 3)).astype(np.float32)
        entries[0] = 0.0
        cb = make_codebook(entries)
        q = residual_quantize(entries[2], cb, 3)
        assert q.stack.indices == (2, 0, 0)
        assert np.array_equal(q.final, entries[2])

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(42)
        for trial in range(200):
            k = int(rng.integers(2, 9))
            depth = int(rng.integers(1, 5))
            d = int(rng.integers(1, 6))
            entries = rng.standard_normal((k, d)).astype(np.float32)
            z = rng.standard_normal(d).astype(np.float32)
            q = residual_quantize(z, cb := make_codebook(entries), depth)
            want_idx, want_final, want_res = brute_force_quantize(z, cb.entries, depth)
            assert list(q.stack.indices) == want_idx

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(3)
        entries = rng.standard_normal((6, 4)).astype(np.float32)
        cb = make_codebook(entries)
        zs = rng.standard_normal((32, 4)).astype(np.float32)
        idx, partials, res_in = quantize_rows(zs, cb, 3)
        for i in range(32):
            q = residual_quantize(zs[i], cb, 3)
            assert tuple(idx[i]) == q.stack.indices
            assert np.array_equal(partials[i], q.partial_sums)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_partial_sums_exact_and_residual_monotone(self, seed):
        rng = np.random.default_rng(seed)
        entries = rng.standard_normal((5, 3)).astype(np.float32)
        entries[0] = 0.0  # zero entry guarantees non-increasing residuals
        cb = make_codebook(entries)
        z = rng.standard_normal(3).astype(np.float32)
        q = residual_quantize(z, cb, 4)
        acc = np.zeros(3, dtype=np.float32)
        prev = float(np.linalg.norm(z))
        residual = z.copy()
        for lvl, k in enumerate(q.stack.indices):
            acc = acc + cb.entries[k]
            assert np.array_equal(q.partial_sums[lvl], acc)
            residual = residual - cb.entries[k]
            norm = float(np.linalg.norm(residual))
            assert norm <= prev + 1e-6
            prev = norm

    def test_capacity_by_trace_enumeration(self):
        # all K^D stacks have distinct coarse-to-fine partial-sum traces
        rng = np.random.default_rng(9)
        entries = rng.standard_normal((4, 5)).astype(np.float32)
        cb = make_codebook(entries)
        seen = set()
        from itertools import product

        for stack in product(range(4), repeat=3):
            acc = np.zeros(5, dtype=np.float32)
            trace = []
            for k in stack:
                acc = acc + cb.entries[k]
                trace.extend(acc.tolist())
            seen.add(tuple(trace))
        assert len(seen) == 4**3


class TestEmaUpdate:
    def test_unassigned_entry_stable(self):
        rng = np.random.default_rng(0)
        entries = rng.standard_normal((4, 2)).astype(np.float32)
        entries[0] = 0.0
        cb = make_codebook(entries)
        out = ema_codebook_update(cb, {1: [np.array([1.0, 1.0])]})
        # entry 3 got nothing: both stats decay proportionally, value stable
        assert np.allclose(out.entries[3], cb.entries[3], atol=1e-4)

    def test_zero_decay_replaces(self):
        cb = make_codebook(np.ones((3, 2)))
        cb.decay = 0.0
        v = np.array([0.25, -0.5])
        out = ema_codebook_update(cb, {2: [v]})
        assert np.allclose(out.entries[2], v, atol=1e-5)

    def test_hand_evaluated_step(self):
        cb = Codebook(
            entries=np.zeros((3, 1), dtype=np.float32),
            ema_cluster_size=np.ones(3),
            ema_embed_sum=np.zeros((3, 1)),
            decay=0.99,
        )
        out = ema_codebook_update(cb, {1: [np.array([1.0])]})
        assert out.entries[1, 0] == pytest.approx(0.01, abs=1e-3)

    def test_input_not_mutated(self):
        cb = make_codebook(np.ones((3, 2)))
        before = cb.entries.copy()
        ema_codebook_update(cb, {1: [np.array([5.0, 5.0])]})
        assert np.array_equal(cb.entries, before)

    def test_entry_zero_stays_pinned(self):
        cb = make_codebook(np.vstack([np.zeros(2), np.ones((2, 2))]))
        out = ema_codebook_update(cb, {0: [np.array([3.0, 3.0])] * 5})
        assert np.all(out.entries[0] == 0)


class TestFitCodebook:
    def test_depth_monotone_reconstruction(self):
        rng = np.random.default_rng(5)
        centers = rng.standard_normal((6, 8)) * 2.0
        vecs = (centers[rng.integers(0, 6, 400)] + 0.3 * rng.standard_normal((400, 8))).astype(
            np.float32
        )
        cb = fit_codebook(vecs, size=16, depth=5, steps=40, rng=np.random.default_rng(0))
        errs = []
        for depth in range(1, 6):
            _, partials, _ = quantize_rows(vecs, cb, depth)
            errs.append(float(((vecs - partials[:, -1]) ** 2).sum(axis=1).mean()))
        assert all(errs[i + 1] <= errs[i] + 1e-9 for i in range(4))


def build_chunk(model, n_tokens=None, rng=None, pad=0):
    rng = rng or np.random.default_rng(0)
    c = model.context_len
    toks = random_tokens(c + 2 - pad, obs_dim=model.obs_dim, act_dim=model.act_dim,
                         macro_len=model.macro_len, rng=rng)
    pads = [zero_token(model.obs_dim, model.macro_len, model.act_dim) for _ in range(pad)]
    return Chunk(tokens=pads + toks, context_len=c, pad_count=pad)


class TestEncodeDecode:
    def test_encode_shape(self):
        model = tiny_rqvae()
        z = encode_chunk(model, build_chunk(model))
        assert z.shape == (model.context_len + 2, model.d_latent)

    def test_encoder_causal(self):
        model = tiny_rqvae()
        rng = np.random.default_rng(1)
        chunk = build_chunk(model, rng=rng)
        z0 = encode_chunk(model, chunk)
        chunk.tokens[3].observation = chunk.tokens[3].observation + 2.0
        z1 = encode_chunk(model, chunk)
        assert np.array_equal(z0[:3], z1[:3])
        assert not np.array_equal(z0[3], z1[3])

    def test_encode_deterministic(self):
        model = tiny_rqvae()
        chunk = build_chunk(model)
        assert np.array_equal(encode_chunk(model, chunk), encode_chunk(model, chunk))

    def test_encode_rejects_wrong_length(self):
        model = tiny_rqvae()
        bad = build_chunk(tiny_rqvae(context_len=4))
        with pytest.raises(ValueError):
            encode_chunk(model, bad)

    def test_decode_shapes(self):
        model = tiny_rqvae()
        t = model.context_len + 2
        q = np.random.default_rng(0).standard_normal((t, model.d_latent)).astype(np.float32)
        anchor = np.zeros(model.obs_dim, dtype=np.float32)
        out = decode_chunk(model, q, anchor)
        assert out.rtg.shape == (t,)
        assert out.macro_return.shape == (t,)
        assert out.observation.shape == (t, model.obs_dim)
        assert out.macro_action.shape == (t, model.macro_len, model.act_dim)

    def test_decoder_causal(self):
        model = tiny_rqvae()
        rng = np.random.default_rng(2)
        t = model.context_len + 2
        q = rng.standard_normal((t, model.d_latent)).astype(np.float32)
        anchor = rng.standard_normal(model.obs_dim).astype(np.float32)
        a = decode_chunk(model, q, anchor)
        q2 = q.copy()
        q2[-1] += 1.0
        b = decode_chunk(model, q2, anchor)
        assert np.array_equal(a.observation[:-1], b.observation[:-1])
        assert not np.array_equal(a.observation[-1], b.observation[-1])


class TestStraightThrough:
    def test_forward_bit_exact(self):
        z = dm.tensor(np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32))
        target = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
        out = straight_through(z, target)
        assert np.array_equal(out.values, target)

    def test_gradient_is_identity(self):
        store = dm.ParameterStore(np.float64)
        z = store.create("z", (4,), np.random.default_rng(0))
        target = np.array([1.0, 2.0, 3.0, 4.0])
        probe = np.array([0.5, -1.0, 2.0, 0.25])
        with dm.Tape() as tape:
            loss = dm.reduce_sum(dm.mul(straight_through(z, target), dm.tensor(probe)))
        dm.backward(tape, loss)
        assert np.allclose(z.grad, probe)

    def test_identity_when_already_quantized(self):
        v = np.random.default_rng(0).standard_normal(5).astype(np.float32)
        out = straight_through(dm.tensor(v), v)
        assert np.array_equal(out.values, v)


def _loss_parts(model, chunks_raw):
    masked = [apply_token_mask(ch, model.mask_spec) for ch in chunks_raw]
    batch = TokenBatch.from_chunks(masked, chunks_raw)
    b, t = batch.shape
    with dm.Tape() as tape:
        z = model.encode_batch(batch)
        idx, partials, _ = quantize_rows(
            z.values.reshape(b * t, model.d_latent), model.codebook, model.depth,
            skip=batch.pad.reshape(-1),
        )
        zq = straight_through(z, partials[:, -1].reshape(b, t, model.d_latent))
        recon = model.decode_latents(zq, batch.obs[:, model.context_len])
        loss, breakdown = rqvae_loss(
            model, batch, recon, z, partials.reshape(b, t, model.depth, model.d_latent)
        )
        model.store.zero_grad()
        dm.backward(tape, loss)
    return loss, breakdown


class TestLoss:
    def test_default_weights(self):
        model = tiny_rqvae()
        assert (model.alpha_tail, model.alpha_ctx, model.beta_ps) == (1.0, 0.1, 1.0)
        with pytest.raises(ValueError):
            tiny_rqvae(beta_ps=-0.5)

    def test_decomposition_identity(self):
        model = tiny_rqvae()
        model.codebook.data_init(
            np.random.default_rng(0).standard_normal((50, model.d_latent)), np.random.default_rng(1)
        )
        chunks = [build_chunk(model, rng=np.random.default_rng(s)) for s in range(4)]
        _, br = _loss_parts(model, chunks)
        want = (
            model.alpha_tail * br.recon_tail
            + model.alpha_ctx * br.recon_ctx
            + model.beta_ps / model.depth * br.commit_per_depth.sum()
        )
        assert br.total == pytest.approx(want, rel=1e-6)

    def test_perfect_reconstruction_zero_loss(self):
        model = tiny_rqvae()
        chunk = build_chunk(model)
        masked = [apply_token_mask(chunk, model.mask_spec)]
        batch = TokenBatch.from_chunks(masked, [chunk])
        b, t = batch.shape
        targets = model.standardized_targets(batch)
        z = dm.tensor(np.zeros((b, t, model.d_latent), dtype=np.float32))
        partials = np.zeros((b, t, model.depth, model.d_latent), dtype=np.float32)
        recon = (
            dm.tensor(targets[0][..., None].astype(np.float32)),
            dm.tensor(targets[1][..., None].astype(np.float32)),
            dm.tensor(targets[2].astype(np.float32)),
            dm.tensor(targets[3].astype(np.float32)),
        )
        _, br = rqvae_loss(model, batch, recon, z, partials)
        assert br.total == pytest.approx(0.0, abs=1e-10)

    def test_hand_example_single_token(self):
        # one unpadded tail token, depth 1: per-element recon MSE 0.09,
        # commitment distance 0.04 -> total 0.13 with tail weight 1, beta 1
        model = tiny_rqvae(context_len=0, depth=1, alpha_tail=1.0, alpha_ctx=0.1, beta_ps=1.0)
        chunk = build_chunk(model)
        masked = [apply_token_mask(chunk, model.mask_spec)]
        batch = TokenBatch.from_chunks(masked, [chunk])
        b, t = batch.shape
        targets = model.standardized_targets(batch)
        err = 0.3
        recon = (
            dm.tensor((targets[0] + err)[..., None].astype(np.float32)),
            dm.tensor((targets[1] + err)[..., None].astype(np.float32)),
            dm.tensor((targets[2] + err).astype(np.float32)),
            dm.tensor((targets[3] + err).astype(np.float32)),
        )
        z = dm.tensor(np.full((b, t, model.d_latent), 0.2, dtype=np.float32))
        partials = np.zeros((b, t, 1, model.d_latent), dtype=np.float32)  # distance 0.2^2
        _, br = rqvae_loss(model, batch, recon, z, partials)
        assert br.recon_tail == pytest.approx(0.09, rel=1e-5)
        assert br.commit_per_depth[0] == pytest.approx(0.04, rel=1e-5)
        assert br.total == pytest.approx(0.13, rel=1e-5)

    def test_encoder_receives_gradient_through_straight_through(self):
        model = tiny_rqvae()
        model.codebook.data_init(
            np.random.default_rng(0).standard_normal((50, model.d_latent)), np.random.default_rng(1)
        )
        chunks = [build_chunk(model, rng=np.random.default_rng(s)) for s in range(2)]
        _loss_parts(model, chunks)
        g = model.store["enc.in.w"].grad
        assert g is not None and np.abs(g).max() > 0

    def test_padded_positions_excluded(self):
        model = tiny_rqvae()
        full = build_chunk(model, rng=np.random.default_rng(3))
        padded = build_chunk(model, rng=np.random.default_rng(3), pad=model.context_len)
        _, br_full = _loss_parts(model, [full])
        _, br_pad = _loss_parts(model, [padded])
        # padded chunk still has both tail tokens, so tail term is finite
        assert np.isfinite(br_pad.total)
        assert br_pad.recon_ctx == pytest.approx(0.0, abs=1e-12)


class TestEncodeHistory:
    def test_empty_history(self):
        assert encode_history_to_codes(tiny_rqvae(), []) == []

    def test_shapes_and_range(self):
        model = tiny_rqvae()
        model.codebook.data_init(
            np.random.default_rng(0).standard_normal((50, model.d_latent)), np.random.default_rng(1)
        )
        rng = np.random.default_rng(2)
        hist = [
            (float(rng.standard_normal()), rng.standard_normal(3).astype(np.float32),
             rng.uniform(-1, 1, (3, 2)).astype(np.float32))
            for _ in range(model.context_len)
        ]
        stacks = encode_history_to_codes(model, hist)
        assert len(stacks) == model.context_len
        for s in stacks:
            assert len(s) == model.depth
            assert all(0 <= k < model.codebook_size for k in s)

    def test_deterministic(self):
        model = tiny_rqvae()
        model.codebook.data_init(
            np.random.default_rng(0).standard_normal((50, model.d_latent)), np.random.default_rng(1)
        )
        rng = np.random.default_rng(2)
        hist = [
            (0.5, rng.standard_normal(3).astype(np.float32),
             rng.uniform(-1, 1, (3, 2)).astype(np.float32))
        ]
        a = encode_history_to_codes(model, hist)
        b = encode_history_to_codes(model, hist)
        assert [s.indices for s in a] == [s.indices for s in b]

    def test_overlong_history_truncated_to_window(self):
        model = tiny_rqvae()
        model.codebook.data_init(
            np.random.default_rng(0).standard_normal((50, model.d_latent)), np.random.default_rng(1)
        )
        rng = np.random.default_rng(2)
        hist = [
            (0.1, rng.standard_normal(3).astype(np.float32),
             rng.uniform(-1, 1, (3, 2)).astype(np.float32))
            for _ in range(model.context_len + 3)
        ]
        assert len(encode_history_to_codes(model, hist)) == model.context_len


class TestOverfitOracle:
    def test_single_chunk_reconstruction(self):
        # a tokenizer overfit on one chunk should reconstruct it almost exactly
        model = tiny_rqvae(d_model=32, d_ff=64, codebook_size=8, depth=2)
        rng = np.random.default_rng(0)
        chunk = build_chunk(model, rng=rng)
        masked = [apply_token_mask(chunk, model.mask_spec)]
        batch = TokenBatch.from_chunks(masked, [chunk])
        b, t = batch.shape
        for step in range(2000):
            with dm.Tape() as tape:
                z = model.encode_batch(batch)
                zf = z.values.reshape(b * t, model.d_latent)
                if not model.codebook.initialized:
                    model.codebook.data_init(zf, rng)
                idx, partials, res_in = quantize_rows(zf, model.codebook, model.depth)
                zq = straight_through(z, partials[:, -1].reshape(b, t, model.d_latent))
                recon = model.decode_latents(zq, batch.obs[:, model.context_len])
                loss, br = rqvae_loss(
                    model, batch, recon, z, partials.reshape(b, t, model.depth, model.d_latent)
                )
                model.store.zero_grad()
                dm.backward(tape, loss)
            dm.adam_step(model.store, 3e-3)
            from itap.rqvae import ema_batch_update

            ema_batch_update(model.codebook, idx, res_in)
        assert br.recon_tail < 1e-3
        assert br.recon_ctx < 1e-3
