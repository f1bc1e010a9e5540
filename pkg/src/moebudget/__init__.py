"""Desk-scale laboratory for expert budgeting in speculative decoding of
mixture-of-experts transformers.

Builds a toy MoE transformer, drafts and verifies token trees, enforces
per-layer expert budgets under three ranking strategies and two coverage
policies, and quantifies the bandwidth/quality tradeoff with an explicit
memory-cost model.
"""

from .analysis import (
    CoactivationMatrix,
    CoverageCurve,
    coactivation,
    concentration_ratio,
    coverage_curve,
    expected_pair_probability,
    pareto_table,
    read_trace,
    reconstruction_error,
)
from .budgeting import (
    CalibrationCounts,
    Shortlist,
    calibrate_static,
    rank_oracle,
    rank_router,
    rank_static,
)
from .coverage import CoveragePolicy, TokenCoverageStats, moe_forward_budgeted, model_forward_budgeted
from .draft_tree import DraftTree, TreeRouting, binary_branching, build_tree, expert_union, union_growth_curve
from .moe_core import (
    Expert,
    MoELayerWeights,
    RouterWeights,
    RoutingRecord,
    mixing_weights,
    moe_forward_full,
    route,
)
from .numerics import Rng, softmax, top_k_indices
from .simulator import (
    BudgetConfig,
    CostModelParams,
    RunSummary,
    StepReport,
    SweepCell,
    SweepSpec,
    run_generation,
    summarize,
    sweep,
    verify_greedy,
)
from .toy_model import (
    DraftSpec,
    ModelConfig,
    MoEModel,
    PRESETS,
    build_target,
    derive_draft,
    forward,
    load_model,
    preset_config,
    save_model,
)

__version__ = "0.1.0"
