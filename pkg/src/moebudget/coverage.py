"""Budgeted MoE execution under a shortlist: truncation or substitution.

Truncation keeps each token's natural top-k routing but zeroes the
contribution of experts outside the shortlist, with mixing weights still
computed over the original top-k set; a token whose entire top-k is missing
passes through on the residual connection alone. Substitution re-selects
top-k within the shortlist so every token gets exactly k experts (or all of
the shortlist when it is smaller than k).

Both policies reduce to per-token (expert, weight) slot assignments fed to
the same grouped executor the unbudgeted forward uses, so a full-capacity
shortlist reproduces the unbudgeted forward bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .budgeting import Shortlist
from .draft_tree import DraftTree, TreeRouting, tree_mask
from .moe_core import (
    MoELayerWeights,
    RoutingRecord,
    apply_experts,
    route_batch,
    selection_weights,
)
from .toy_model import ForwardResult, MoEModel, forward

__all__ = [
    "BudgetedForward",
    "CoveragePolicy",
    "TokenCoverageStats",
    "model_forward_budgeted",
    "moe_forward_budgeted",
    "policy_assignments",
]


class CoveragePolicy(str, enum.Enum):
    TRUNCATION = "truncation"
    SUBSTITUTION = "substitution"


@dataclass
class TokenCoverageStats:
    """How far a token's natural routing fell outside the shortlist."""

    missing_count: int  # |top_k \ shortlist|, in 0..k
    fully_skipped: bool  # no natural expert available (missing_count == k)


def policy_assignments(
    layer: MoELayerWeights,
    probs: np.ndarray,
    selected: np.ndarray,
    shortlist: Shortlist,
    policy: CoveragePolicy,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token expert slot assignments under a coverage policy.

    Returns (ids, weights, missing): ids is (T, k) expert indices with -1
    marking inactive slots, weights is (T, k) mixing weights, and missing is
    the per-token count of natural experts absent from the shortlist.
    """
    policy = CoveragePolicy(policy)
    member = shortlist.member_table(layer.n_experts)
    in_list = member[selected]  # (T, k)
    missing = layer.k - in_list.sum(axis=1)

    if policy is CoveragePolicy.TRUNCATION:
        weights = selection_weights(probs, selected, layer.renormalize)
        ids = np.where(in_list, selected, -1)
        return ids, weights, missing

    # Substitution: top-k constrained to the shortlist, ranked by routing
    # probability with ties to the lower expert index. Probabilities are
    # strictly positive, so -1 safely sorts non-members last.
    k_eff = min(layer.k, shortlist.budget)
    masked = np.where(member, probs, -1.0)
    ids = np.argsort(-masked, axis=-1, kind="stable")[:, : layer.k]
    weights = selection_weights(probs, ids, layer.renormalize)
    if k_eff < layer.k:
        # Renormalize over the members only, then deactivate the overflow.
        if layer.renormalize:
            w_eff = np.take_along_axis(probs, ids[:, :k_eff], axis=-1)
            weights = np.zeros_like(weights)
            weights[:, :k_eff] = w_eff / w_eff.sum(axis=-1, keepdims=True)
        ids = np.where(np.arange(layer.k) < k_eff, ids, -1)
    return ids, weights, missing


def moe_forward_budgeted(
    layer: MoELayerWeights,
    h: np.ndarray,
    record: RoutingRecord,
    shortlist: Shortlist,
    policy: CoveragePolicy,
) -> tuple[np.ndarray, TokenCoverageStats]:
    """Budgeted layer output for a single token plus its coverage stats."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d_model,):
        raise ValueError(f"hidden state must have shape ({layer.d_model},), got {h.shape}")
    ids, weights, missing = policy_assignments(
        layer, record.probs[None, :], record.selected[None, :], shortlist, policy
    )
    out = apply_experts(layer, h[None, :], ids, weights)
    m = int(missing[0])
    return out[0], TokenCoverageStats(missing_count=m, fully_skipped=m == layer.k)


@dataclass
class BudgetedForward:
    """Everything a verification step needs from a budgeted tree forward."""

    result: ForwardResult  # logits + natural routing of every row
    routing: TreeRouting  # tree-row slice of the natural routing
    shortlists: list[Shortlist]
    missing_counts: list[np.ndarray]  # per layer, (M,) ints
    fully_skipped: list[np.ndarray]  # per layer, (M,) bools
    executed: list[np.ndarray]  # per layer, sorted expert ids actually run


def model_forward_budgeted(
    model: MoEModel,
    context_tokens,
    tree: DraftTree,
    shortlists,
    policy: CoveragePolicy,
) -> BudgetedForward:
    """Tree-attention forward where each MoE sublayer runs under a budget.

    Context rows execute at full capacity (they stand in for cached history
    whose cost the model charges to the shared term); only draft-tree rows
    are budgeted. Routing is computed from the budgeted stream's own hidden
    states, so approximation compounds across layers exactly as a real
    budgeted verification pass would, and the captured routing is the
    natural routing of that stream, recorded before budgeting.

    ``shortlists`` is either a sequence with one Shortlist per MoE layer, or
    a callable ``(layer_index, layer, tree_states, probs, selected) ->
    Shortlist`` invoked mid-forward (router and oracle ranking need the
    budgeted stream's own states).
    """
    policy = CoveragePolicy(policy)
    context_tokens = np.asarray(context_tokens, dtype=np.int64)
    n_context = int(context_tokens.size)
    provider = shortlists if callable(shortlists) else None
    if provider is None:
        shortlists = list(shortlists)
        if len(shortlists) != model.n_layers:
            raise ValueError("need one shortlist per MoE layer")

    used: list[Shortlist] = []
    missing_counts: list[np.ndarray] = []
    fully_skipped: list[np.ndarray] = []
    executed: list[np.ndarray] = []

    def moe_fn(li: int, layer: MoELayerWeights, states: np.ndarray):
        probs, selected = route_batch(layer, states)
        node_probs, node_sel = probs[n_context:], selected[n_context:]
        node_states = states[n_context:]
        sl = (
            provider(li, layer, node_states, node_probs, node_sel)
            if provider
            else shortlists[li]
        )
        node_ids, node_w, missing = policy_assignments(
            layer, node_probs, node_sel, sl, policy
        )
        ids = np.concatenate([selected[:n_context], node_ids])
        weights = np.concatenate(
            [
                selection_weights(
                    probs[:n_context], selected[:n_context], layer.renormalize
                ),
                node_w,
            ]
        )
        out = apply_experts(layer, states, ids, weights)
        used.append(sl)
        missing_counts.append(missing)
        fully_skipped.append(missing == layer.k)
        executed.append(np.unique(node_ids[node_ids >= 0]))
        return out, probs, selected

    all_tokens = np.concatenate([context_tokens, tree.tokens])
    result = forward(model, all_tokens, tree_mask(n_context, tree), moe_fn=moe_fn)
    return BudgetedForward(
        result=result,
        routing=TreeRouting.from_forward(result, n_context),
        shortlists=used,
        missing_counts=missing_counts,
        fully_skipped=fully_skipped,
        executed=executed,
    )
