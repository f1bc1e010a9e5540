from __future__ import annotations

import numpy as np
import pytest

from moebudget.analysis import coverage_curve
from moebudget.moe_core import route_batch
from moebudget.numerics import Rng
from moebudget.toy_model import (
    DraftSpec,
    ModelConfig,
    MoEModel,
    TreeDecoder,
    build_target,
    causal_mask,
    derive_draft,
    forward,
    load_model,
    preset_config,
    random_tokens,
    save_model,
)


def models_equal(a: MoEModel, b: MoEModel) -> bool:
    if a.config != b.config:
        return False
    if not np.array_equal(a.embedding, b.embedding) or not np.array_equal(a.head, b.head):
        return False
    for ba, bb in zip(a.blocks, b.blocks):
        for attr in ("wq", "wk", "wv", "wo"):
            if not np.array_equal(getattr(ba.attention, attr), getattr(bb.attention, attr)):
                return False
        if not np.array_equal(ba.moe.router.w, bb.moe.router.w):
            return False
        if not np.array_equal(ba.moe.router.bias, bb.moe.router.bias):
            return False
        for ea, eb in zip(ba.moe.experts, bb.moe.experts):
            if not np.array_equal(ea.w_in, eb.w_in) or not np.array_equal(ea.w_out, eb.w_out):
                return False
    return True


class TestBuildTarget:
    def test_same_seed_bit_identical_models(self, small_config):
        assert models_equal(build_target(small_config), build_target(small_config))

    def test_different_seed_differs(self, small_config):
        import dataclasses

        other = dataclasses.replace(small_config, seed=small_config.seed + 1)
        assert not models_equal(build_target(small_config), build_target(other))

    def test_skew_zero_experts_exchangeable_within_3_sigma(self):
        # With skew=0 experts are exchangeable, so over independent
        # (router, state) draws each expert lands in the top-k with
        # probability exactly k/N. Monte-Carlo over 10k draws, mirroring the
        # build-time router init (Gaussian 1/sqrt(d), zero bias).
        n, k, d, trials = 64, 8, 32, 10_000
        rng = Rng(99)
        routers = rng.substream(0).normal(size=(trials, n, d)) / np.sqrt(d)
        states = rng.substream(1).normal(size=(trials, d))
        logits = np.einsum("tnd,td->tn", routers, states)
        selected = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        counts = np.bincount(selected.ravel(), minlength=n)
        p = k / n
        sigma = np.sqrt(p * (1 - p) / trials)
        freq = counts / trials
        assert np.all(np.abs(freq - p) <= 3 * sigma), np.abs(freq - p).max() / sigma

    def test_skew_zero_fixed_model_frequencies_sane(self):
        # A single fixed router is not exactly uniform (finite-d variance),
        # but stays in a sane band around k/N.
        cfg = ModelConfig(skew=0.0, seed=5)
        model = build_target(cfg)
        states = Rng(99).normal(size=(10_000, cfg.d_model))
        _, selected = route_batch(model.blocks[0].moe, states)
        freq = np.bincount(selected.ravel(), minlength=cfg.n_experts) / 10_000
        assert freq.min() > 0.03 and freq.max() < 0.3

    def test_skew_concentrates_routing(self):
        # Top-half coverage strictly larger under skew=2 than skew=0,
        # averaged over 10 seeds.
        diffs = []
        for seed in range(10):
            states = Rng(1000 + seed).normal(size=(256, 32))
            cover = {}
            for skew in (0.0, 2.0):
                model = build_target(ModelConfig(skew=skew, seed=seed))
                probs, _ = route_batch(model.blocks[0].moe, states)
                cover[skew] = coverage_curve(probs).at(32)
            diffs.append(cover[2.0] - cover[0.0])
        assert np.mean(diffs) > 0
        assert np.mean(diffs) > 0.1  # concentration is substantial, not marginal

    def test_skew_zero_bias_is_zero(self):
        model = build_target(ModelConfig(skew=0.0))
        for block in model.blocks:
            np.testing.assert_array_equal(block.moe.router.bias, np.zeros(64))

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(top_k=9, n_experts=8).validate()
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=1).validate()
        with pytest.raises(ValueError):
            ModelConfig(skew=-1.0).validate()

    def test_presets(self):
        assert preset_config("olmoe-toy").n_experts == 64
        assert preset_config("olmoe-toy").renormalize is True
        assert preset_config("qwen3-toy").n_experts == 128
        assert preset_config("qwen3-toy").renormalize is False
        assert preset_config("mixtral-toy").n_experts == 8
        assert preset_config("mixtral-toy").top_k == 2
        with pytest.raises(ValueError):
            preset_config("nope")


class TestDeriveDraft:
    def test_zero_noise_is_exact_copy(self, small_target):
        draft = derive_draft(small_target, DraftSpec(noise_std=0.0), Rng(1))
        assert models_equal(draft, small_target)

    def test_layers_kept_truncates(self, small_target):
        draft = derive_draft(small_target, DraftSpec(noise_std=0.0, layers_kept=1), Rng(1))
        assert draft.n_layers == 1
        assert np.array_equal(draft.blocks[0].attention.wq, small_target.blocks[0].attention.wq)
        assert np.array_equal(draft.head, small_target.head)

    def test_noise_perturbs_blocks_not_embeddings(self, small_target):
        draft = derive_draft(small_target, DraftSpec(noise_std=0.1), Rng(1))
        assert np.array_equal(draft.embedding, small_target.embedding)
        assert np.array_equal(draft.head, small_target.head)
        assert not np.array_equal(
            draft.blocks[0].attention.wq, small_target.blocks[0].attention.wq
        )

    def test_invalid_spec_rejected(self, small_target):
        with pytest.raises(ValueError):
            DraftSpec(noise_std=-0.1).validate(2)
        with pytest.raises(ValueError):
            DraftSpec(layers_kept=3).validate(2)


class TestForward:
    def test_single_token_tree_mask_equals_causal(self, small_target):
        tokens = np.array([5])
        a = forward(small_target, tokens)
        b = forward(small_target, tokens, np.ones((1, 1), dtype=bool))
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_chain_tree_mask_equals_sequential_causal(self, target):
        # A degenerate chain tree is exactly a causal sequence.
        tokens = random_tokens(Rng(1), 5, target.config.vocab_size)
        causal = forward(target, tokens)
        chain = forward(target, tokens, causal_mask(5))
        np.testing.assert_allclose(chain.logits, causal.logits, atol=1e-9)
        for la, lb in zip(causal.layers, chain.layers):
            np.testing.assert_allclose(la.moe_input, lb.moe_input, atol=1e-9)

    def test_path_restriction_matches_flat_sequence(self, small_target):
        # Tree-masked forward restricted to a root-to-node path equals the
        # causal forward of that path as a flat sequence, per layer.
        rng = Rng(8)
        tokens = random_tokens(rng, 7, small_target.config.vocab_size)
        # Tree over positions 3..6: parents chain 3 <- 4, 3 <- 5, 5 <- 6.
        mask = np.zeros((7, 7), dtype=bool)
        mask[:3, :3] = causal_mask(3)
        parents = {3: -1, 4: 3, 5: 3, 6: 5}
        for node in range(3, 7):
            mask[node, :3] = True
            mask[node, node] = True
            p = parents[node]
            while p != -1:
                mask[node, p] = True
                p = parents[p]
        tree_result = forward(small_target, tokens, mask)
        path = [0, 1, 2, 3, 5, 6]
        flat = forward(small_target, tokens[path])
        for row_flat, row_tree in enumerate(path):
            np.testing.assert_allclose(
                flat.logits[row_flat], tree_result.logits[row_tree], atol=1e-9
            )
            for la, lb in zip(flat.layers, tree_result.layers):
                np.testing.assert_allclose(
                    la.moe_input[row_flat], lb.moe_input[row_tree], atol=1e-9
                )

    def test_zeroed_attention_output_isolates_embedding_path(self, small_config):
        # With the attention output projection zeroed, a position's logits
        # depend only on its own token embedding.
        model = build_target(small_config)
        for block in model.blocks:
            block.attention.wo[:] = 0.0
        t1 = np.array([3, 9, 4])
        t2 = np.array([7, 1, 4])
        a = forward(model, t1)
        b = forward(model, t2)
        np.testing.assert_allclose(a.logits[2], b.logits[2], atol=1e-12)

    def test_out_of_range_token_rejected(self, small_target):
        with pytest.raises(ValueError):
            forward(small_target, [small_target.config.vocab_size])

    def test_determinism(self, small_target):
        tokens = random_tokens(Rng(2), 9, small_target.config.vocab_size)
        a = forward(small_target, tokens)
        b = forward(small_target, tokens)
        np.testing.assert_array_equal(a.logits, b.logits)


class TestTreeDecoder:
    def test_context_logits_match_forward(self, small_target):
        tokens = random_tokens(Rng(3), 6, small_target.config.vocab_size)
        dec = TreeDecoder(small_target, tokens)
        ref = forward(small_target, tokens)
        np.testing.assert_allclose(dec.context_logits, ref.logits[-1], atol=1e-12)

    def test_extend_matches_one_shot_masked_forward(self, small_target):
        vocab = small_target.config.vocab_size
        ctx = random_tokens(Rng(4), 5, vocab)
        dec = TreeDecoder(small_target, ctx)
        root = 7
        l1 = dec.extend([root], [-1])
        kids = [2, 11]
        l2 = dec.extend(kids, [5, 5])

        all_tokens = np.concatenate([ctx, [root], kids])
        mask = np.zeros((8, 8), dtype=bool)
        mask[:5, :5] = causal_mask(5)
        mask[5:, :5] = True
        mask[5, 5] = True
        mask[6, 5] = mask[6, 6] = True
        mask[7, 5] = mask[7, 7] = True
        ref = forward(small_target, all_tokens, mask)
        np.testing.assert_allclose(l1[0], ref.logits[5], atol=1e-9)
        np.testing.assert_allclose(l2, ref.logits[6:], atol=1e-9)

    def test_append_tokens_matches_causal_forward(self, small_target):
        vocab = small_target.config.vocab_size
        ctx = random_tokens(Rng(5), 4, vocab)
        extra = random_tokens(Rng(6), 3, vocab)
        dec = TreeDecoder(small_target, ctx)
        last = dec.append_tokens(extra)
        ref = forward(small_target, np.concatenate([ctx, extra]))
        np.testing.assert_allclose(last, ref.logits[-1], atol=1e-9)
        np.testing.assert_allclose(dec.context_logits, ref.logits[-1], atol=1e-9)

    def test_rollback_restores_state(self, small_target):
        vocab = small_target.config.vocab_size
        ctx = random_tokens(Rng(7), 4, vocab)
        dec = TreeDecoder(small_target, ctx)
        marker = dec.checkpoint()
        before = dec.extend([1], [-1]).copy()
        dec.rollback(marker)
        again = dec.extend([1], [-1])
        np.testing.assert_array_equal(before, again)

    def test_append_with_tree_rows_rejected(self, small_target):
        dec = TreeDecoder(small_target, [1, 2])
        dec.extend([3], [-1])
        with pytest.raises(ValueError):
            dec.append_tokens([4])


class TestSerialization:
    def test_round_trip_bit_exact(self, small_target, tmp_path):
        path = tmp_path / "model.moem"
        save_model(small_target, path)
        assert models_equal(load_model(path), small_target)

    def test_save_is_byte_deterministic(self, small_target, tmp_path):
        p1, p2 = tmp_path / "a.moem", tmp_path / "b.moem"
        save_model(small_target, p1)
        save_model(small_target, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.moem"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_model(path)

    def test_draft_round_trip(self, small_target, tmp_path):
        draft = derive_draft(small_target, DraftSpec(layers_kept=1), Rng(2))
        path = tmp_path / "draft.moem"
        save_model(draft, path)
        loaded = load_model(path)
        assert loaded.n_layers == 1
        assert models_equal(loaded, draft)
