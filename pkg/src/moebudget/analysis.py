"""Offline analytics over routing records and step reports: reconstruction
error, coverage curves, co-activation concentration, and Pareto tables.

Computations accept either in-process routing (TreeRouting) or external
trace files (JSON lines, one record per token and layer), so logs from real
systems can be analyzed with the same code paths the toy lab uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .budgeting import (
    CalibrationCounts,
    Shortlist,
    oracle_reconstruction_weights,
    rank_oracle,
    rank_router,
    rank_static,
)
from .coverage import CoveragePolicy, policy_assignments
from .draft_tree import TreeRouting, binary_branching, build_tree, tree_mask
from .moe_core import MoELayerWeights, apply_experts, expert_outputs_all, selection_weights
from .numerics import Rng, top_k_indices
from .toy_model import MoEModel, forward, random_tokens

__all__ = [
    "CoactivationMatrix",
    "CoverageCurve",
    "coactivation",
    "coverage_curve",
    "expected_pair_probability",
    "pareto_table",
    "read_trace",
    "reconstruction_error",
    "write_trace_dense",
    "write_trace_topk",
]

RECONSTRUCTION_MODES = ("raw", "truncation", "substitution")


# ---------------------------------------------------------------------------
# Reconstruction error
# ---------------------------------------------------------------------------


def reconstruction_error(
    layer: MoELayerWeights,
    states: np.ndarray,
    probs: np.ndarray,
    selected: np.ndarray,
    shortlist: Shortlist,
    mode: str = "raw",
    uses_raw_g: bool = True,
) -> float:
    """Normalized squared distance between the budgeted layer output and the
    unbudgeted output on the same (teacher-forced) hidden states.

    ``mode`` selects what "budgeted output" means: "raw" sums every
    shortlisted expert weighted by its routing probability (the quantity the
    greedy oracle minimizes), while "truncation"/"substitution" apply the
    corresponding coverage policy. The normalizer is the summed squared norm
    of the unbudgeted outputs.
    """
    if mode not in RECONSTRUCTION_MODES:
        raise ValueError(f"mode must be one of {RECONSTRUCTION_MODES}, got {mode!r}")
    states = np.asarray(states, dtype=np.float64)

    gold_w = selection_weights(probs, selected, layer.renormalize)
    gold = apply_experts(layer, states, selected, gold_w)
    denom = float(np.sum(gold * gold))
    if denom == 0.0:
        raise ValueError("degenerate input: unbudgeted outputs are identically zero")

    if mode == "raw":
        w = oracle_reconstruction_weights(probs, selected, layer.renormalize, uses_raw_g)
        contributions = expert_outputs_all(layer, states) * w[:, :, None]
        approx = contributions[:, shortlist.experts].sum(axis=1)
    else:
        ids, weights, _ = policy_assignments(
            layer, probs, selected, shortlist, CoveragePolicy(mode)
        )
        approx = apply_experts(layer, states, ids, weights)

    diff = approx - gold
    return float(np.sum(diff * diff)) / denom


def teacher_forced_layers(
    target: MoEModel, context_tokens, tree
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per MoE layer: (states, probs, selected) of the tree rows under the
    full model, the inputs reconstruction analysis measures against."""
    context_tokens = np.asarray(context_tokens, dtype=np.int64)
    n_context = context_tokens.size
    all_tokens = np.concatenate([context_tokens, tree.tokens])
    result = forward(target, all_tokens, tree_mask(n_context, tree))
    return [
        (t.moe_input[n_context:], t.probs[n_context:], t.selected[n_context:])
        for t in result.layers
    ]


def method_shortlist(
    method: str,
    layer_index: int,
    layer: MoELayerWeights,
    states: np.ndarray,
    probs: np.ndarray,
    selected: np.ndarray,
    budget: int,
    static_counts: CalibrationCounts | None = None,
    uses_raw_g: bool = True,
) -> Shortlist:
    """Shortlist for one layer under any ranking method, teacher-forced."""
    if method == "static":
        if static_counts is None:
            raise ValueError("static ranking requires calibration counts")
        return rank_static(static_counts, layer_index, budget)
    if method == "router":
        return rank_router(probs, layer_index, budget)
    if method == "oracle":
        return rank_oracle(layer, states, probs, selected, layer_index, budget, uses_raw_g)
    raise ValueError(f"unknown ranking method {method!r}")


def reconstruction_analysis(
    target: MoEModel,
    draft: MoEModel,
    methods,
    budgets,
    n_trees: int = 20,
    tree_size: int = 63,
    context_len: int = 16,
    rng: Rng | None = None,
    mode: str = "raw",
    static_counts: CalibrationCounts | None = None,
    uses_raw_g: bool = True,
) -> dict[tuple[str, int], list[float]]:
    """Layer-averaged teacher-forced reconstruction error per seeded tree.

    Returns {(method, budget): [error per tree]}; callers take means or
    spreads as needed.
    """
    rng = rng if rng is not None else Rng(0)
    branching = binary_branching(tree_size)
    out: dict[tuple[str, int], list[float]] = {
        (m, int(b)): [] for m in methods for b in budgets
    }
    for t in range(n_trees):
        context = random_tokens(rng.substream(t), context_len, target.config.vocab_size)
        tree = build_tree(draft, context, branching)
        layers = teacher_forced_layers(target, context, tree)
        for method in methods:
            for budget in budgets:
                errs = []
                for li, (states, probs, selected) in enumerate(layers):
                    sl = method_shortlist(
                        method,
                        li,
                        target.blocks[li].moe,
                        states,
                        probs,
                        selected,
                        int(budget),
                        static_counts,
                        uses_raw_g,
                    )
                    errs.append(
                        reconstruction_error(
                            target.blocks[li].moe,
                            states,
                            probs,
                            selected,
                            sl,
                            mode,
                            uses_raw_g,
                        )
                    )
                out[(method, int(budget))].append(float(np.mean(errs)))
    return out


# ---------------------------------------------------------------------------
# Coverage curves
# ---------------------------------------------------------------------------


@dataclass
class CoverageCurve:
    """Cumulative aggregate routing probability captured by the top-B
    experts, for every B in 1..n_experts."""

    layer: int
    values: np.ndarray  # (n_experts,), values[B-1] = coverage at budget B

    def at(self, budget: int) -> float:
        return float(self.values[budget - 1])


def coverage_curve(tree_probs: np.ndarray, layer: int = 0) -> CoverageCurve:
    """Coverage curve from the (M, n_experts) routing of one layer's tree."""
    scores = np.asarray(tree_probs, dtype=np.float64).sum(axis=0)
    total = scores.sum()
    if total <= 0:
        raise ValueError("routing mass must be positive")
    order = top_k_indices(scores, scores.size)
    return CoverageCurve(layer=layer, values=np.cumsum(scores[order]) / total)


def coverage_curves(routing: TreeRouting) -> list[CoverageCurve]:
    return [coverage_curve(routing.probs[li], li) for li in range(routing.n_layers)]


# ---------------------------------------------------------------------------
# Co-activation
# ---------------------------------------------------------------------------


@dataclass
class CoactivationMatrix:
    """Symmetric pair-selection counts; entry (i, j) counts tokens whose
    top-k contained both i and j, so the diagonal holds per-expert counts."""

    layer: int
    counts: np.ndarray  # (n_experts, n_experts) int64
    tokens_observed: int


def coactivation(selected: np.ndarray, n_experts: int, layer: int = 0) -> CoactivationMatrix:
    """Co-activation matrix of a (T, k) selection stream."""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.ndim != 2 or selected.shape[0] == 0:
        raise ValueError("selected must be a non-empty (tokens, k) array")
    k = selected.shape[1]
    counts = np.zeros((n_experts, n_experts), dtype=np.int64)
    i_idx = np.repeat(selected, k, axis=1).ravel()
    j_idx = np.tile(selected, (1, k)).ravel()
    np.add.at(counts, (i_idx, j_idx), 1)
    return CoactivationMatrix(layer=layer, counts=counts, tokens_observed=selected.shape[0])


def expected_pair_probability(n_experts: int, k: int) -> Fraction:
    """Probability that a specific expert pair co-occurs under uniform-random
    selection of k from n: k(k-1) / (n(n-1)), as an exact rational."""
    return Fraction(k * (k - 1), n_experts * (n_experts - 1))


def concentration_ratio(matrix: CoactivationMatrix, k: int) -> float:
    """Largest off-diagonal pair count relative to its uniform-random
    expectation."""
    n = matrix.counts.shape[0]
    off = matrix.counts.copy()
    np.fill_diagonal(off, 0)
    expected = matrix.tokens_observed * expected_pair_probability(n, k)
    if expected == 0:
        raise ValueError("expected pair count is zero (k < 2 or no tokens)")
    return float(off.max() / float(expected))


# ---------------------------------------------------------------------------
# Pareto table
# ---------------------------------------------------------------------------


def pareto_table(rows) -> list[dict]:
    """Quality-versus-speedup rows normalized to the AR baseline.

    ``rows`` are sweep rows; quality is the exact-match rate of each cell's
    token stream against AR greedy (the strictest drift proxy the toy has).
    Cells are aggregated over seeds and sorted by speedup.
    """
    rows = list(rows)
    if not any(r.cell.mode == "ar" for r in rows):
        raise ValueError("pareto table requires AR baseline cells in the sweep")

    by_cell: dict[tuple, list] = {}
    for r in rows:
        by_cell.setdefault(r.cell.key(), []).append(r)

    table = []
    for key in sorted(by_cell):
        group = by_cell[key]
        cell = group[0].cell
        table.append(
            {
                "mode": cell.mode,
                "method": cell.method or "",
                "policy": cell.policy or "",
                "budget": cell.budget if cell.budget is not None else "",
                "tree_size": cell.tree_size,
                "speedup": float(np.mean([r.speedup for r in group])),
                "quality_pct": float(np.mean([r.ar_match_rate for r in group])) * 100.0,
            }
        )
    table.sort(key=lambda r: (r["speedup"], str(r)))
    return table


# ---------------------------------------------------------------------------
# External trace ingestion
# ---------------------------------------------------------------------------


def write_trace_dense(path, probs_by_layer: dict[int, np.ndarray]) -> None:
    """One JSON object per (token, layer): {"layer": l, "probs": [...]}."""
    with open(path, "w") as f:
        for layer in sorted(probs_by_layer):
            for row in probs_by_layer[layer]:
                f.write(json.dumps({"layer": layer, "probs": [float(p) for p in row]}))
                f.write("\n")


def write_trace_topk(
    path, probs_by_layer: dict[int, np.ndarray], selected_by_layer: dict[int, np.ndarray]
) -> None:
    """Sparse trace: {"layer": l, "topk": [[index, prob], ...]} per token."""
    with open(path, "w") as f:
        for layer in sorted(probs_by_layer):
            probs = probs_by_layer[layer]
            for t, sel in enumerate(selected_by_layer[layer]):
                pairs = [[int(i), float(probs[t, i])] for i in sel]
                f.write(json.dumps({"layer": layer, "topk": pairs}))
                f.write("\n")


def read_trace(path, n_experts: int, k: int | None = None) -> dict[int, dict[str, np.ndarray]]:
    """Parse an external routing trace into per-layer arrays.

    Dense records carry the full probability vector; sparse records list
    (index, probability) pairs and unlisted experts count as probability 0.
    Returns {layer: {"probs": (T, n_experts), "selected": (T, k)}}; for
    dense records the selection is the top-k by probability, so ``k`` is
    required when any dense record appears.
    """
    probs_rows: dict[int, list[np.ndarray]] = {}
    sel_rows: dict[int, list[np.ndarray]] = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            layer = int(rec["layer"])
            if "probs" in rec:
                vec = np.asarray(rec["probs"], dtype=np.float64)
                if vec.size != n_experts:
                    raise ValueError(
                        f"line {line_no}: probs length {vec.size} != n_experts {n_experts}"
                    )
                if k is None:
                    raise ValueError(
                        "k is required to derive selections from dense trace records"
                    )
                sel = top_k_indices(vec, k)
            elif "topk" in rec:
                pairs = rec["topk"]
                vec = np.zeros(n_experts, dtype=np.float64)
                for idx, p in pairs:
                    vec[int(idx)] = float(p)
                kk = k if k is not None else len(pairs)
                sel = top_k_indices(vec, kk)
            else:
                raise ValueError(f"line {line_no}: record needs 'probs' or 'topk'")
            probs_rows.setdefault(layer, []).append(vec)
            sel_rows.setdefault(layer, []).append(sel)

    out = {}
    for layer in sorted(probs_rows):
        sels = sel_rows[layer]
        widths = {s.size for s in sels}
        if len(widths) != 1:
            raise ValueError(f"layer {layer}: inconsistent top-k widths {sorted(widths)}")
        out[layer] = {
            "probs": np.stack(probs_rows[layer]),
            "selected": np.stack(sels),
        }
    return out
