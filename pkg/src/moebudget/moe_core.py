"""Single MoE layer: router, expert networks, mixing weights, full forward.

The full (unbudgeted) forward is the ground truth that budgeted execution is
measured against. Expert execution is funneled through one grouped executor,
``apply_experts``, so that the full and budgeted code paths perform identical
arithmetic whenever they apply identical (expert, weight) assignments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import scratch, softmax, top_k_indices

__all__ = [
    "Expert",
    "MoELayerWeights",
    "RouterWeights",
    "RoutingRecord",
    "mixing_weights",
    "moe_forward_full",
    "route",
]


def silu(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Smooth gate nonlinearity used inside every expert.

    x / (1 + e^-x), with the exponent clipped at the float64 overflow edge;
    below -709 the true value is subnormal-zero anyway. The pipeline runs on
    one buffer (``out`` when given) because chained fresh temporaries of
    this size pay more in page faults than the arithmetic costs.
    """
    out = np.negative(x, out=out)
    np.minimum(out, 709.0, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.divide(x, out, out=out)
    return out


@dataclass
class RouterWeights:
    """Per-expert routing vectors plus an additive logit bias.

    The bias is zero for unskewed models; skewed models use it to concentrate
    routing mass on a subset of experts.
    """

    w: np.ndarray  # (n_experts, d_model)
    bias: np.ndarray  # (n_experts,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValueError("router weight matrix must be 2-D")
        if self.bias.shape != (self.w.shape[0],):
            raise ValueError("router bias length must equal expert count")


@dataclass
class Expert:
    """Two-layer feed-forward network: w_out @ silu(w_in @ h)."""

    w_in: np.ndarray  # (d_ff, d_model)
    w_out: np.ndarray  # (d_model, d_ff)


@dataclass
class MoELayerWeights:
    router: RouterWeights
    experts: list[Expert]
    renormalize: bool
    k: int
    _stacks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.experts)
        if not (1 <= self.k <= n):
            raise ValueError(f"need 1 <= k <= n_experts, got k={self.k}, n={n}")
        if self.router.w.shape[0] != n:
            raise ValueError("router rows must match expert count")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.router.w.shape[1]

    @property
    def d_ff(self) -> int:
        return self.experts[0].w_in.shape[0]

    # Stacked weight tensors, built lazily; layers are immutable after
    # construction so the cache never goes stale.
    @property
    def w_in_stack(self) -> np.ndarray:  # (n_experts, d_ff, d_model)
        if "w_in" not in self._stacks:
            self._stacks["w_in"] = np.stack([e.w_in for e in self.experts])
        return self._stacks["w_in"]

    @property
    def w_out_stack(self) -> np.ndarray:  # (n_experts, d_model, d_ff)
        if "w_out" not in self._stacks:
            self._stacks["w_out"] = np.stack([e.w_out for e in self.experts])
        return self._stacks["w_out"]


@dataclass
class RoutingRecord:
    """A token's router distribution and its natural top-k selection."""

    probs: np.ndarray  # (n_experts,)
    selected: np.ndarray  # (k,) descending by probability, ties to lower index


def route(layer: MoELayerWeights, h: np.ndarray) -> RoutingRecord:
    """Router distribution and top-k selection for a single token."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d_model,):
        raise ValueError(f"hidden state must have shape ({layer.d_model},), got {h.shape}")
    probs = softmax(layer.router.w @ h + layer.router.bias)
    return RoutingRecord(probs=probs, selected=top_k_indices(probs, layer.k))


def route_batch(layer: MoELayerWeights, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``route`` over a (T, d_model) batch of token states.

    Returns (probs, selected) of shapes (T, n_experts) and (T, k).
    """
    states = np.asarray(states, dtype=np.float64)
    logits = states @ layer.router.w.T + layer.router.bias
    probs = softmax(logits, axis=-1)
    return probs, top_k_indices(probs, layer.k)


def mixing_weights(
    record: RoutingRecord, over, renormalize: bool
) -> dict[int, float]:
    """Mixing weight per expert in ``over``: raw routing probabilities, or
    probabilities renormalized to sum to 1 over ``over``.
    """
    over = [int(i) for i in over]
    if not over:
        raise ValueError("mixing_weights requires a non-empty expert set")
    raw = {i: float(record.probs[i]) for i in over}
    if not renormalize:
        return raw
    total = sum(raw.values())
    if total <= 0.0:
        raise ValueError("cannot renormalize: selected probabilities sum to zero")
    return {i: v / total for i, v in raw.items()}


def selection_weights(
    probs: np.ndarray, selected: np.ndarray, renormalize: bool
) -> np.ndarray:
    """Vectorized mixing weights for (T, k) selections against (T, N) probs."""
    w = np.take_along_axis(probs, selected, axis=-1)
    if renormalize:
        totals = w.sum(axis=-1, keepdims=True)
        if np.any(totals <= 0.0):
            raise ValueError("cannot renormalize: selected probabilities sum to zero")
        w = w / totals
    return w


def apply_experts(
    layer: MoELayerWeights,
    states: np.ndarray,
    expert_ids: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """Weighted sum of expert outputs per token.

    ``expert_ids`` is (T, j) with -1 marking inactive slots; ``weights`` is
    (T, j). Tokens whose slots are all inactive produce the zero vector.
    Slots are sorted by expert so each distinct expert runs exactly one
    matmul over its contiguous token group; only experts that actually
    appear are touched.
    """
    states = np.asarray(states, dtype=np.float64)
    n_tokens, n_slots = expert_ids.shape
    d = layer.d_model
    out_slots = scratch("apply_slots", n_tokens * n_slots, d)
    out_slots[:] = 0.0

    flat_ids = expert_ids.ravel()
    active = np.nonzero(flat_ids >= 0)[0]
    if active.size > 0:
        order = np.argsort(flat_ids[active], kind="stable")
        sorted_slots = active[order]
        sorted_ids = flat_ids[sorted_slots]
        # Group boundaries on the already-sorted ids.
        steps = np.nonzero(np.diff(sorted_ids))[0] + 1
        starts = np.concatenate(([0], steps))
        ends = np.concatenate((steps, [sorted_ids.size]))

        n_active = sorted_ids.size
        gathered = np.take(states, sorted_slots // n_slots, axis=0,
                           out=scratch("apply_gathered", n_active, d))
        w_in = layer.w_in_stack
        w_out = layer.w_out_stack
        pre = scratch("apply_pre", n_active, layer.d_ff)
        for gi in range(starts.size):
            lo, hi = starts[gi], ends[gi]
            np.matmul(gathered[lo:hi], w_in[sorted_ids[lo]].T, out=pre[lo:hi])
        act = silu(pre, out=scratch("apply_act", n_active, layer.d_ff))
        produced = scratch("apply_produced", n_active, d)
        for gi in range(starts.size):
            lo, hi = starts[gi], ends[gi]
            np.matmul(act[lo:hi], w_out[sorted_ids[lo]].T, out=produced[lo:hi])
        out_slots[sorted_slots] = produced

    slot_w = np.where(expert_ids >= 0, weights, 0.0)
    return np.einsum("tjd,tj->td", out_slots.reshape(n_tokens, n_slots, d), slot_w)


def moe_forward_full_batch(
    layer: MoELayerWeights, states: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unbudgeted layer output for a (T, d_model) batch.

    Returns (outputs, probs, selected); the outputs are the ground truth that
    budgeted execution approximates.
    """
    probs, selected = route_batch(layer, states)
    weights = selection_weights(probs, selected, layer.renormalize)
    return apply_experts(layer, states, selected, weights), probs, selected


def moe_forward_full(layer: MoELayerWeights, h: np.ndarray) -> np.ndarray:
    """Unbudgeted MoE layer output for a single token."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d_model,):
        raise ValueError(f"hidden state must have shape ({layer.d_model},), got {h.shape}")
    out, _, _ = moe_forward_full_batch(layer, h[None, :])
    return out[0]


def expert_outputs_grouped(
    layer: MoELayerWeights, states: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Every expert's output on every token, grouped by expert:
    shape (n_experts, T, d_model).

    Dense evaluation used by oracle ranking and reconstruction analysis,
    which need full model access by definition. ``out`` may be a reusable
    buffer; callers that let the result escape must pass a fresh one.
    """
    states = np.asarray(states, dtype=np.float64)
    n, d_ff, d = layer.w_in_stack.shape
    t = states.shape[0]
    # One dgemm for every expert's first projection, then a batched second
    # projection: (T, d) @ (d, N*d_ff) -> (N, T, d_ff) -> (N, T, d).
    pre = np.matmul(
        states, layer.w_in_stack.reshape(n * d_ff, d).T, out=scratch("dense_pre", t, n * d_ff)
    )
    act = silu(pre, out=scratch("dense_act", t, n * d_ff))
    hidden = act.reshape(t, n, d_ff).transpose(1, 0, 2)
    if out is None:
        out = np.empty((n, t, d))
    np.matmul(hidden, layer.w_out_stack.transpose(0, 2, 1), out=out)
    return out


def expert_outputs_all(layer: MoELayerWeights, states: np.ndarray) -> np.ndarray:
    """Every expert's output on every token: shape (T, n_experts, d_model)."""
    grouped = expert_outputs_grouped(
        layer, states, out=scratch("dense_grouped", layer.n_experts, len(states), layer.d_model)
    )
    return np.ascontiguousarray(grouped.transpose(1, 0, 2))
