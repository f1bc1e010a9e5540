from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest

from moebudget.moe_core import (
    Expert,
    MoELayerWeights,
    RouterWeights,
    apply_experts,
    expert_outputs_all,
    mixing_weights,
    moe_forward_full,
    moe_forward_full_batch,
    route,
    route_batch,
    silu,
)
from moebudget.numerics import Rng


def make_layer(n=8, k=2, d=4, d_ff=6, renormalize=True, seed=0, bias=None) -> MoELayerWeights:
    rng = Rng(seed)
    router = RouterWeights(
        w=rng.substream(0).normal(size=(n, d)),
        bias=np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64),
    )
    experts = [
        Expert(
            w_in=rng.substream(1, i).normal(size=(d_ff, d)),
            w_out=rng.substream(2, i).normal(size=(d, d_ff)),
        )
        for i in range(n)
    ]
    return MoELayerWeights(router=router, experts=experts, renormalize=renormalize, k=k)


def silu_scalar(x: float) -> float:
    return x / (1.0 + math.exp(-x)) if x > -700 else 0.0


def expert_eval_naive(expert: Expert, h: np.ndarray) -> np.ndarray:
    """Brute-force two-layer MLP, scalar loops only."""
    d_ff, d = expert.w_in.shape
    hidden = [silu_scalar(sum(expert.w_in[f, j] * h[j] for j in range(d))) for f in range(d_ff)]
    return np.array(
        [sum(expert.w_out[i, f] * hidden[f] for f in range(d_ff)) for i in range(d)]
    )


def route_highprec(layer: MoELayerWeights, h: np.ndarray) -> np.ndarray:
    """Routing distribution evaluated at 50 decimal digits."""
    with mpmath.workdps(50):
        logits = [
            mpmath.fsum(
                [mpmath.mpf(float(layer.router.w[i, j])) * mpmath.mpf(float(h[j]))
                 for j in range(h.size)]
            )
            + mpmath.mpf(float(layer.router.bias[i]))
            for i in range(layer.n_experts)
        ]
        exps = [mpmath.exp(l) for l in logits]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


class TestRoute:
    def test_identical_router_rows_give_uniform_probs(self):
        layer = make_layer(n=6, k=3)
        layer.router.w[:] = layer.router.w[0]
        rec = route(layer, Rng(1).normal(size=4))
        np.testing.assert_allclose(rec.probs, np.full(6, 1 / 6), atol=1e-12)
        assert rec.selected.tolist() == [0, 1, 2]  # tie rule

    def test_matches_high_precision_oracle(self):
        layer = make_layer(n=4, k=2, d=4)
        for i in range(10):
            h = Rng(100 + i).normal(size=4)
            rec = route(layer, h)
            np.testing.assert_allclose(rec.probs, route_highprec(layer, h), atol=1e-12)
            assert rec.selected.tolist() == sorted(
                range(4), key=lambda j: (-rec.probs[j], j)
            )[:2]

    def test_expert_permutation_permutes_probs(self):
        layer = make_layer(n=6, k=2)
        h = Rng(2).normal(size=4)
        base = route(layer, h).probs
        perm = Rng(3).permutation(6)
        permuted = make_layer(n=6, k=2)
        permuted.router.w[:] = layer.router.w[perm]
        got = route(permuted, h).probs
        np.testing.assert_allclose(got, base[perm], atol=1e-15)

    def test_dimension_mismatch_rejected(self):
        layer = make_layer()
        with pytest.raises(ValueError):
            route(layer, np.zeros(5))

    def test_bias_shifts_routing(self):
        h = Rng(4).normal(size=4)
        flat = route(make_layer(n=8, k=2), h).probs
        boosted = route(make_layer(n=8, k=2, bias=[10, 0, 0, 0, 0, 0, 0, 0]), h).probs
        assert boosted[0] > flat[0]

    def test_batch_matches_single(self):
        layer = make_layer(n=8, k=3)
        states = Rng(5).normal(size=(7, 4))
        probs, selected = route_batch(layer, states)
        for t in range(7):
            rec = route(layer, states[t])
            np.testing.assert_allclose(probs[t], rec.probs, atol=1e-15)
            assert selected[t].tolist() == rec.selected.tolist()


class TestMixingWeights:
    def test_renormalized_weights_sum_to_one(self):
        layer = make_layer()
        rec = route(layer, Rng(1).normal(size=4))
        w = mixing_weights(rec, rec.selected, renormalize=True)
        assert abs(sum(w.values()) - 1.0) < 1e-12

    def test_raw_weights_equal_probs(self):
        layer = make_layer()
        rec = route(layer, Rng(1).normal(size=4))
        w = mixing_weights(rec, rec.selected, renormalize=False)
        for i, v in w.items():
            assert v == rec.probs[i]

    def test_single_expert_renormalizes_to_one(self):
        layer = make_layer()
        rec = route(layer, Rng(1).normal(size=4))
        w = mixing_weights(rec, [int(rec.selected[0])], renormalize=True)
        assert w[int(rec.selected[0])] == 1.0

    def test_empty_set_rejected(self):
        layer = make_layer()
        rec = route(layer, Rng(1).normal(size=4))
        with pytest.raises(ValueError):
            mixing_weights(rec, [], renormalize=True)

    def test_zero_mass_guarded(self):
        rec_probs = np.zeros(4)
        from moebudget.moe_core import RoutingRecord

        rec = RoutingRecord(probs=rec_probs, selected=np.array([0, 1]))
        with pytest.raises(ValueError):
            mixing_weights(rec, [0, 1], renormalize=True)


class TestForwardFull:
    def test_zero_experts_give_zero_output(self):
        layer = make_layer()
        for e in layer.experts:
            e.w_in[:] = 0.0
            e.w_out[:] = 0.0
        layer._stacks.clear()
        out = moe_forward_full(layer, Rng(1).normal(size=4))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_all_experts_active_equals_dense_mixture(self):
        layer = make_layer(n=4, k=4, renormalize=True)
        h = Rng(2).normal(size=4)
        rec = route(layer, h)
        dense = sum(
            rec.probs[i] * expert_eval_naive(layer.experts[i], h) for i in range(4)
        )
        np.testing.assert_allclose(moe_forward_full(layer, h), dense, atol=1e-9)

    @pytest.mark.parametrize("renormalize", [True, False])
    def test_matches_bruteforce_oracle(self, renormalize):
        layer = make_layer(n=8, k=2, d=4, renormalize=renormalize)
        for i in range(10):
            h = Rng(200 + i).normal(size=4)
            rec = route(layer, h)
            weights = mixing_weights(rec, rec.selected, renormalize)
            want = sum(weights[i] * expert_eval_naive(layer.experts[i], h) for i in weights)
            np.testing.assert_allclose(moe_forward_full(layer, h), want, atol=1e-9)

    def test_batch_matches_single(self):
        layer = make_layer(n=8, k=3, renormalize=True)
        states = Rng(6).normal(size=(5, 4))
        outs, _, _ = moe_forward_full_batch(layer, states)
        for t in range(5):
            np.testing.assert_allclose(
                outs[t], moe_forward_full(layer, states[t]), atol=1e-12
            )

    def test_scaled_input_stays_finite_with_k_selected(self):
        layer = make_layer(n=8, k=2)
        h = Rng(7).normal(size=4)
        for scale in (1.0, 10.0, 1000.0):
            rec = route(layer, scale * h)
            assert rec.selected.size == 2
            assert np.all(np.isfinite(moe_forward_full(layer, scale * h)))


class TestApplyExperts:
    def test_matches_naive_slot_loop(self):
        layer = make_layer(n=8, k=2, d=4)
        rng = Rng(31)
        states = rng.normal(size=(6, 4))
        ids = rng.integers(-1, 8, size=(6, 3))
        weights = rng.normal(size=(6, 3))
        got = apply_experts(layer, states, ids, weights)
        want = np.zeros((6, 4))
        for t in range(6):
            for j in range(3):
                if ids[t, j] >= 0:
                    want[t] += weights[t, j] * expert_eval_naive(
                        layer.experts[ids[t, j]], states[t]
                    )
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_all_inactive_rows_are_zero(self):
        layer = make_layer()
        states = Rng(1).normal(size=(3, 4))
        ids = np.full((3, 2), -1)
        out = apply_experts(layer, states, ids, np.ones((3, 2)))
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_dense_expert_outputs_match_naive(self):
        layer = make_layer(n=5, k=2, d=4)
        states = Rng(2).normal(size=(3, 4))
        dense = expert_outputs_all(layer, states)
        for t in range(3):
            for e in range(5):
                np.testing.assert_allclose(
                    dense[t, e], expert_eval_naive(layer.experts[e], states[t]), atol=1e-9
                )


def test_silu_basics():
    assert silu(np.array([0.0]))[0] == 0.0
    x = np.array([-1000.0, -1.0, 1.0, 50.0])
    out = silu(x)
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(-1.0 / (1.0 + math.e), rel=1e-12)
    assert out[3] == pytest.approx(50.0, rel=1e-12)
    assert np.all(np.isfinite(out))


def test_layer_validation():
    with pytest.raises(ValueError):
        make_layer(n=4, k=5)
    with pytest.raises(ValueError):
        RouterWeights(w=np.zeros((4, 3)), bias=np.zeros(5))
