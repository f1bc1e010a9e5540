"""The speculative loop: draft a tree, verify greedily, accept, append; plus
the memory-bandwidth cost model that converts measured expert loads into a
modeled speedup over autoregressive decoding.

Cost is modeled, not timed: desk-scale CPU execution is nowhere near the
bandwidth-bound regime the model describes, so every claim is expressed in
explicit cost units. An autoregressive step pays the shared cost plus k
experts per layer; a verification step pays the shared cost plus the unique
experts it actually loads per layer, an optional selection-overhead factor
when budgeting, and a per-level drafting charge. Wall-clock time is reported
for information only and never written into result files.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .budgeting import (
    CalibrationCounts,
    Shortlist,
    calibrate_static,
    rank_oracle,
    rank_router,
    rank_static,
)
from .coverage import CoveragePolicy, model_forward_budgeted, policy_assignments
from .draft_tree import (
    DEFAULT_CONTEXT_LEN,
    DraftTree,
    binary_branching,
    expand_tree,
    tree_mask,
)
from .moe_core import apply_experts, moe_forward_full_batch, route_batch
from .numerics import Rng
from .toy_model import (
    DraftSpec,
    ModelConfig,
    MoEModel,
    TreeDecoder,
    build_target,
    derive_draft,
    forward,
    random_tokens,
)

__all__ = [
    "BudgetConfig",
    "CostModelParams",
    "GenerationRun",
    "RunSummary",
    "StepReport",
    "SweepCell",
    "SweepResult",
    "run_generation",
    "summarize",
    "sweep",
    "verify_greedy",
]

# Substream indices reserved off the master seed; model weights use the
# low indices inside build_target, so these stay disjoint.
DRAFT_STREAM = 100
PROMPT_STREAM = 101
CALIB_STREAM = 102

CALIBRATION_TOKENS = 2048
CALIBRATION_SEQ_LEN = 128

MODES = ("ar", "spec_full", "spec_budgeted")


@dataclass(frozen=True)
class CostModelParams:
    """Bandwidth-cost constants, in arbitrary cost units.

    Defaults are derived once (see demos/derive_cost_defaults.py) so that
    expert bytes dominate the per-layer shared cost roughly 4:1 at the
    autoregressive operating point and the unbudgeted speedup curve peaks at
    an interior tree size.
    """

    bytes_expert: float = 1.0
    bytes_shared: float = 8.0
    draft_step_cost: float = 2.0
    selection_overhead_frac: float = 0.025

    def validate(self) -> None:
        for name in ("bytes_expert", "bytes_shared", "draft_step_cost", "selection_overhead_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def ar_step_cost(self, n_layers: int, k: int) -> float:
        return self.bytes_shared + n_layers * k * self.bytes_expert

    def verify_step_cost(self, unique_experts, budgeted: bool) -> float:
        base = self.bytes_shared + self.bytes_expert * float(np.sum(unique_experts))
        if budgeted:
            base *= 1.0 + self.selection_overhead_frac
        return base

    def draft_cost(self, tree_depth: int) -> float:
        return self.draft_step_cost * tree_depth


@dataclass(frozen=True)
class BudgetConfig:
    """How verification is budgeted: ranking method, coverage policy, B."""

    method: str  # static | router | oracle
    policy: CoveragePolicy
    budget: int
    uses_raw_g: bool = True

    def validate(self) -> None:
        if self.method not in ("static", "router", "oracle"):
            raise ValueError(f"unknown ranking method {self.method!r}")
        CoveragePolicy(self.policy)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass
class StepReport:
    """Per-step measurement: acceptance, expert loads, modeled costs."""

    tau: int  # accepted tokens incl. the bonus token
    emitted: list[int]  # tokens actually appended (may be trimmed at gen end)
    unique_experts: list[int]  # per layer, unique experts loaded for the tree
    tree_depth: int  # draft levels run (drafting cost multiplier)
    mode: str
    method: str | None
    policy: str | None
    budget: int | None
    verify_cost: float
    draft_cost: float
    missing_counts: list[list[int]] | None = None  # per layer, per tree token
    fully_skipped: list[list[bool]] | None = None

    @property
    def step_cost(self) -> float:
        return self.verify_cost + self.draft_cost

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "emitted": self.emitted,
            "unique_experts": self.unique_experts,
            "tree_depth": self.tree_depth,
            "mode": self.mode,
            "method": self.method,
            "policy": self.policy,
            "budget": self.budget,
            "verify_cost": self.verify_cost,
            "draft_cost": self.draft_cost,
            "missing_counts": self.missing_counts,
            "fully_skipped": self.fully_skipped,
        }


@dataclass
class RunSummary:
    mode: str
    method: str | None
    policy: str | None
    budget: int | None
    tokens: int
    steps: int
    mean_tau: float
    mean_unique_experts: list[float]  # per layer
    total_cost: float
    cost_per_token: float
    speedup: float
    wall_clock_s: float  # informational only; never serialized into outputs


@dataclass
class GenerationRun:
    tokens: list[int]
    summary: RunSummary
    reports: list[StepReport]


def _greedy_accept(
    tree: DraftTree, tree_logits: np.ndarray, anchor_logits: np.ndarray
) -> tuple[list[int], int]:
    """Accepted root-to-leaf node path and the bonus token.

    A node is accepted iff its parent is accepted and its token equals the
    verifier argmax at the parent position (the context end for the root).
    Drafted siblings are distinct, so at most one child of an accepted node
    can match; ties on depth resolve to the earliest node in draft order.
    """
    node_argmax = np.argmax(tree_logits, axis=-1)  # first maximum = lower index
    anchor_argmax = int(np.argmax(anchor_logits))
    accepted = np.zeros(tree.size, dtype=bool)
    best_node = -1
    for i in range(tree.size):
        p = int(tree.parents[i])
        parent_ok = p == -1 or accepted[p]
        want = anchor_argmax if p == -1 else int(node_argmax[p])
        if parent_ok and int(tree.tokens[i]) == want:
            accepted[i] = True
            if best_node == -1 or tree.depths[i] > tree.depths[best_node]:
                best_node = i

    if best_node == -1:
        return [], anchor_argmax
    path = tree.path_to(best_node)
    return path, int(node_argmax[best_node])


def _shortlist_source(budget_cfg: BudgetConfig, static_shortlists):
    """Per-layer shortlists (static) or a mid-forward provider (router,
    oracle) for model_forward_budgeted."""
    if budget_cfg.method == "static":
        if static_shortlists is None:
            raise ValueError("static ranking requires calibrated shortlists")
        return [
            Shortlist(
                layer=s.layer,
                experts=s.experts[: budget_cfg.budget],
                method=s.method,
                scores=s.scores[: budget_cfg.budget],
            )
            if s.budget > budget_cfg.budget
            else s
            for s in static_shortlists
        ]
    if budget_cfg.method == "router":

        def provider(li, layer, states, probs, selected):
            return rank_router(probs, li, budget_cfg.budget)

        return provider

    def provider(li, layer, states, probs, selected):
        return rank_oracle(
            layer, states, probs, selected, li, budget_cfg.budget, budget_cfg.uses_raw_g
        )

    return provider


def _build_report(
    tree: DraftTree,
    emitted: list[int],
    unique: list[int],
    budget_cfg: BudgetConfig | None,
    cost: CostModelParams,
    missing: list[list[int]] | None,
    fully: list[list[bool]] | None,
) -> StepReport:
    budgeted = budget_cfg is not None
    return StepReport(
        tau=len(emitted),
        emitted=emitted,
        unique_experts=unique,
        tree_depth=len(tree.branching) + 1,
        mode="spec_budgeted" if budgeted else "spec_full",
        method=budget_cfg.method if budgeted else None,
        policy=CoveragePolicy(budget_cfg.policy).value if budgeted else None,
        budget=budget_cfg.budget if budgeted else None,
        verify_cost=cost.verify_step_cost(unique, budgeted),
        draft_cost=cost.draft_cost(len(tree.branching) + 1),
        missing_counts=missing,
        fully_skipped=fully,
    )


def verify_greedy(
    target: MoEModel,
    context_tokens,
    tree: DraftTree,
    budget_cfg: BudgetConfig | None = None,
    cost: CostModelParams = CostModelParams(),
    static_shortlists: list[Shortlist] | None = None,
) -> tuple[list[int], StepReport]:
    """One verification step over a drafted tree (one-shot forward).

    Runs the target forward (budgeted when ``budget_cfg`` is given) with
    ancestor masking, accepts the deepest drafted chain consistent with the
    verifier's greedy choices, and appends the bonus token. Returns the
    emitted tokens and the step report.
    """
    context_tokens = np.asarray(context_tokens, dtype=np.int64)
    n_context = int(context_tokens.size)

    if budget_cfg is None:
        all_tokens = np.concatenate([context_tokens, tree.tokens])
        result = forward(target, all_tokens, tree_mask(n_context, tree))
        logits = result.logits
        unique = [
            int(np.unique(trace.selected[n_context:]).size) for trace in result.layers
        ]
        missing = fully = None
    else:
        budget_cfg.validate()
        out = model_forward_budgeted(
            target,
            context_tokens,
            tree,
            _shortlist_source(budget_cfg, static_shortlists),
            budget_cfg.policy,
        )
        logits = out.result.logits
        unique = [int(e.size) for e in out.executed]
        missing = [m.tolist() for m in out.missing_counts]
        fully = [f.tolist() for f in out.fully_skipped]

    path, bonus = _greedy_accept(tree, logits[n_context:], logits[n_context - 1])
    emitted = [int(tree.tokens[i]) for i in path] + [bonus]
    return emitted, _build_report(tree, emitted, unique, budget_cfg, cost, missing, fully)


def _session_verify(
    decoder: TreeDecoder,
    tree: DraftTree,
    budget_cfg: BudgetConfig | None,
    cost: CostModelParams,
    static_shortlists: list[Shortlist] | None,
) -> tuple[list[int], StepReport]:
    """Verification step against a persistent target decoder.

    Arithmetically equivalent to ``verify_greedy`` (the prefix rows of a
    causal model never change when rows are appended); the prefix cache just
    avoids redoing them. Tree rows are appended, judged, and rolled back.
    """
    unique: list[int] = []
    missing: list[list[int]] = []
    fully: list[list[bool]] = []

    if budget_cfg is None:

        def hook(li, layer, states):
            out, probs, selected = moe_forward_full_batch(layer, states)
            unique.append(int(np.unique(selected).size))
            return out, probs, selected

    else:
        budget_cfg.validate()
        source = _shortlist_source(budget_cfg, static_shortlists)
        provider = source if callable(source) else None

        def hook(li, layer, states):
            probs, selected = route_batch(layer, states)
            sl = provider(li, layer, states, probs, selected) if provider else source[li]
            ids, w, miss = policy_assignments(layer, probs, selected, sl, budget_cfg.policy)
            out = apply_experts(layer, states, ids, w)
            unique.append(int(np.unique(ids[ids >= 0]).size))
            missing.append(miss.tolist())
            fully.append((miss == layer.k).tolist())
            return out, probs, selected

    marker = decoder.checkpoint()
    anchor_logits = decoder.context_logits
    tree_logits = decoder.extend_tree(tree, hook)
    decoder.rollback(marker)

    path, bonus = _greedy_accept(tree, tree_logits, anchor_logits)
    emitted = [int(tree.tokens[i]) for i in path] + [bonus]
    return emitted, _build_report(
        tree,
        emitted,
        unique,
        budget_cfg,
        cost,
        missing if budget_cfg is not None else None,
        fully if budget_cfg is not None else None,
    )


def static_shortlists_from_counts(
    counts: CalibrationCounts, budget: int
) -> list[Shortlist]:
    return [rank_static(counts, li, budget) for li in range(counts.counts.shape[0])]


def default_calibration(target: MoEModel, rng: Rng) -> CalibrationCounts:
    """Selection counts over seeded random sequences, disjoint from every
    evaluation prompt stream."""
    n_seqs = CALIBRATION_TOKENS // CALIBRATION_SEQ_LEN
    seqs = [
        random_tokens(rng.substream(i), CALIBRATION_SEQ_LEN, target.config.vocab_size)
        for i in range(n_seqs)
    ]
    return calibrate_static(target, seqs)


def run_generation(
    target: MoEModel,
    draft: MoEModel,
    prompt,
    gen_len: int,
    mode: str,
    cost: CostModelParams = CostModelParams(),
    budget_cfg: BudgetConfig | None = None,
    tree_size: int = 63,
    static_counts: CalibrationCounts | None = None,
    keep_coverage: bool = False,
) -> GenerationRun:
    """Generate ``gen_len`` tokens from ``prompt`` in one of three modes:
    plain autoregressive greedy, speculative with full verification, or
    speculative with budgeted verification.
    """
    if gen_len < 1:
        raise ValueError("gen_len must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "spec_budgeted" and budget_cfg is None:
        raise ValueError("spec_budgeted requires a BudgetConfig")
    cost.validate()

    started = time.perf_counter()
    cfg = target.config
    context = list(np.asarray(prompt, dtype=np.int64))
    if not context:
        raise ValueError("prompt must be non-empty")

    static_shortlists = None
    if mode == "spec_budgeted" and budget_cfg.method == "static":
        if static_counts is None:
            raise ValueError("static ranking requires calibration counts")
        static_shortlists = static_shortlists_from_counts(static_counts, budget_cfg.budget)

    generated: list[int] = []
    reports: list[StepReport] = []

    if mode == "ar":
        ar_cost = cost.ar_step_cost(cfg.n_layers, cfg.top_k)
        decoder = TreeDecoder(target, np.asarray(context, dtype=np.int64))
        for _ in range(gen_len):
            nxt = int(np.argmax(decoder.context_logits))
            decoder.append_tokens([nxt])
            generated.append(nxt)
            reports.append(
                StepReport(
                    tau=1,
                    emitted=[nxt],
                    unique_experts=[cfg.top_k] * cfg.n_layers,
                    tree_depth=0,
                    mode="ar",
                    method=None,
                    policy=None,
                    budget=None,
                    verify_cost=ar_cost,
                    draft_cost=0.0,
                )
            )
    else:
        branching = binary_branching(tree_size)
        use_budget = budget_cfg if mode == "spec_budgeted" else None
        # Persistent decoders serve the whole loop: tree rows are rolled
        # back each step and accepted tokens extend the causal prefix, which
        # is exact under ancestor masking (appending rows never changes
        # earlier ones). Modeled costs are computed as if the verify step
        # re-read the context (charged to the shared term), so the prefix
        # cache changes wall-clock only, never reported numbers.
        draft_dec = TreeDecoder(draft, np.asarray(context, dtype=np.int64))
        target_dec = TreeDecoder(target, np.asarray(context, dtype=np.int64))
        while len(generated) < gen_len:
            marker = draft_dec.checkpoint()
            tree = expand_tree(draft_dec, branching)
            draft_dec.rollback(marker)
            emitted, report = _session_verify(
                target_dec, tree, use_budget, cost, static_shortlists
            )
            if not keep_coverage:
                report.missing_counts = None
                report.fully_skipped = None
            emitted = emitted[: gen_len - len(generated)]
            report.emitted = emitted
            draft_dec.append_tokens(emitted)
            target_dec.append_tokens(emitted)
            generated.extend(emitted)
            reports.append(report)

    summary = summarize(reports, cost, cfg, wall_clock_s=time.perf_counter() - started)
    return GenerationRun(tokens=generated, summary=summary, reports=reports)


def summarize(
    reports: list[StepReport],
    cost: CostModelParams,
    cfg: ModelConfig,
    wall_clock_s: float = 0.0,
) -> RunSummary:
    """Aggregate step reports into a run summary.

    This is a pure function of the tau/unique-expert/emitted sequences and
    the cost parameters, so summaries can be recomputed from stored reports
    with zero drift.
    """
    if not reports:
        raise ValueError("cannot summarize an empty run")
    tokens = sum(len(r.emitted) for r in reports)
    total_cost = sum(r.step_cost for r in reports)
    ar_per_token = cost.ar_step_cost(cfg.n_layers, cfg.top_k)
    per_token = total_cost / tokens
    first = reports[0]
    return RunSummary(
        mode=first.mode,
        method=first.method,
        policy=first.policy,
        budget=first.budget,
        tokens=tokens,
        steps=len(reports),
        mean_tau=float(np.mean([r.tau for r in reports])),
        mean_unique_experts=np.mean(
            [r.unique_experts for r in reports], axis=0
        ).tolist(),
        total_cost=total_cost,
        cost_per_token=per_token,
        speedup=ar_per_token / per_token,
        wall_clock_s=wall_clock_s,
    )


# ---------------------------------------------------------------------------
# Sweep harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    """One grid point: execution mode plus its budgeting coordinates."""

    mode: str  # ar | spec_full | spec_budgeted
    tree_size: int = 63
    method: str | None = None
    policy: str | None = None
    budget: int | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "spec_budgeted":
            if self.method is None or self.policy is None or self.budget is None:
                raise ValueError("spec_budgeted cells need method, policy and budget")
        if self.mode != "ar":
            binary_branching(self.tree_size)

    def key(self) -> tuple:
        return (
            self.mode,
            self.tree_size,
            self.method or "",
            self.policy or "",
            -1 if self.budget is None else self.budget,
        )


@dataclass(frozen=True)
class SweepSpec:
    model_config: ModelConfig
    draft_spec: DraftSpec
    cells: tuple[SweepCell, ...]
    seeds: tuple[int, ...]
    gen_len: int = 64
    context_len: int = DEFAULT_CONTEXT_LEN
    cost: CostModelParams = CostModelParams()
    uses_raw_g: bool = True

    def validate(self) -> None:
        self.model_config.validate()
        self.draft_spec.validate(self.model_config.n_layers)
        self.cost.validate()
        if not self.cells:
            raise ValueError("sweep needs at least one cell")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        for cell in self.cells:
            cell.validate()


@dataclass
class SweepRow:
    cell: SweepCell
    seed: int
    tokens: int
    steps: int
    mean_tau: float
    mean_unique_experts: float  # averaged across layers
    unique_experts_per_layer: list[float]
    max_unique_experts: int  # max over steps and layers
    total_cost: float
    speedup: float
    ar_match_rate: float


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[SweepRow]
    reports: dict[tuple, list[StepReport]] = field(default_factory=dict)
    failures: list[tuple[SweepCell, int, str]] = field(default_factory=list)

    def ar_rows(self) -> list[SweepRow]:
        return [r for r in self.rows if r.cell.mode == "ar"]


# Per-process cache so pooled sweep workers build each model pair once.
_MODEL_CACHE: dict = {}


def build_model_pair(
    model_config: ModelConfig, draft_spec: DraftSpec
) -> tuple[MoEModel, MoEModel]:
    """Target model plus its derived draft, memoized per process."""
    key = (model_config, draft_spec)
    if key not in _MODEL_CACHE:
        if len(_MODEL_CACHE) > 8:
            _MODEL_CACHE.clear()
        target = build_target(model_config)
        draft = derive_draft(
            target, draft_spec, Rng(model_config.seed).substream(DRAFT_STREAM)
        )
        _MODEL_CACHE[key] = (target, draft)
    return _MODEL_CACHE[key]


def _build_models(spec: SweepSpec) -> tuple[MoEModel, MoEModel]:
    return build_model_pair(spec.model_config, spec.draft_spec)


def _prompt_for_seed(spec: SweepSpec, seed: int) -> np.ndarray:
    rng = Rng(spec.model_config.seed).substream(PROMPT_STREAM, seed)
    return random_tokens(rng, spec.context_len, spec.model_config.vocab_size)


def _needs_static(spec: SweepSpec) -> bool:
    return any(c.mode == "spec_budgeted" and c.method == "static" for c in spec.cells)


def _run_cell(
    spec: SweepSpec,
    cell: SweepCell,
    seed: int,
    target: MoEModel,
    draft: MoEModel,
    static_counts: CalibrationCounts | None,
    ar_stream: list[int],
    keep_reports: bool,
) -> tuple[SweepRow, list[StepReport] | None]:
    prompt = _prompt_for_seed(spec, seed)
    budget_cfg = None
    if cell.mode == "spec_budgeted":
        budget_cfg = BudgetConfig(
            method=cell.method,
            policy=CoveragePolicy(cell.policy),
            budget=cell.budget,
            uses_raw_g=spec.uses_raw_g,
        )
    run = run_generation(
        target,
        draft,
        prompt,
        spec.gen_len,
        cell.mode,
        spec.cost,
        budget_cfg,
        tree_size=cell.tree_size,
        static_counts=static_counts,
    )
    matches = float(np.mean(np.array(run.tokens) == np.array(ar_stream)))
    s = run.summary
    row = SweepRow(
        cell=cell,
        seed=seed,
        tokens=s.tokens,
        steps=s.steps,
        mean_tau=s.mean_tau,
        mean_unique_experts=float(np.mean(s.mean_unique_experts)),
        unique_experts_per_layer=s.mean_unique_experts,
        max_unique_experts=max(max(r.unique_experts) for r in run.reports),
        total_cost=s.total_cost,
        speedup=s.speedup,
        ar_match_rate=matches,
    )
    return row, (run.reports if keep_reports else None)


def _sweep_task(args) -> tuple[tuple, SweepRow | None, list[StepReport] | None, str | None]:
    """Worker entry point; rebuilds models from the spec so results depend
    only on the cell identity, never on scheduling."""
    spec, cell, seed, static_counts, ar_stream, keep_reports, strict = args
    try:
        target, draft = _build_models(spec)
        row, reports = _run_cell(
            spec, cell, seed, target, draft, static_counts, ar_stream, keep_reports
        )
        return (cell.key(), seed), row, reports, None
    except Exception as exc:  # noqa: BLE001 - collected for the failure report
        if strict:
            raise
        return (cell.key(), seed), None, None, f"{type(exc).__name__}: {exc}"


def sweep(
    spec: SweepSpec, workers: int = 1, keep_reports: bool = False, strict: bool = True
) -> SweepResult:
    """Deterministic grid evaluation over cells x seeds.

    The autoregressive baseline for every seed is always computed (it anchors
    both the speedup normalization and the exact-match quality proxy), then
    remaining cells run in any order -- results are byte-identical for any
    worker count because every task is keyed by (cell, seed) alone. With
    ``strict=False`` failing cells are collected instead of raised.
    """
    spec.validate()
    target, draft = _build_models(spec)

    static_counts = None
    if _needs_static(spec):
        static_counts = default_calibration(
            target, Rng(spec.model_config.seed).substream(CALIB_STREAM)
        )

    # Phase 1: AR baselines per seed (serial; these are the reference runs).
    ar_rows: dict[int, SweepRow] = {}
    ar_streams: dict[int, list[int]] = {}
    ar_reports: dict[int, list[StepReport] | None] = {}
    for seed in spec.seeds:
        prompt = _prompt_for_seed(spec, seed)
        run = run_generation(target, draft, prompt, spec.gen_len, "ar", spec.cost)
        ar_streams[seed] = run.tokens
        s = run.summary
        ar_rows[seed] = SweepRow(
            cell=SweepCell(mode="ar"),
            seed=seed,
            tokens=s.tokens,
            steps=s.steps,
            mean_tau=s.mean_tau,
            mean_unique_experts=float(np.mean(s.mean_unique_experts)),
            unique_experts_per_layer=s.mean_unique_experts,
            max_unique_experts=target.config.top_k,
            total_cost=s.total_cost,
            speedup=s.speedup,
            ar_match_rate=1.0,
        )
        ar_reports[seed] = run.reports if keep_reports else None

    tasks = []
    for cell in spec.cells:
        if cell.mode == "ar":
            continue
        for seed in spec.seeds:
            tasks.append(
                (spec, cell, seed, static_counts, ar_streams[seed], keep_reports, strict)
            )

    results: dict[tuple, tuple[SweepRow | None, list[StepReport] | None, str | None]] = {}
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for key, row, reports, error in pool.map(_sweep_task, tasks):
                results[key] = (row, reports, error)
    else:
        for task in tasks:
            key, row, reports, error = _sweep_task(task)
            results[key] = (row, reports, error)

    rows: list[SweepRow] = []
    reports_out: dict[tuple, list[StepReport]] = {}
    failures: list[tuple[SweepCell, int, str]] = []
    want_ar = any(c.mode == "ar" for c in spec.cells)
    ordered_cells = sorted({c.key(): c for c in spec.cells}.items())
    for key, cell in ordered_cells:
        for seed in sorted(spec.seeds):
            if cell.mode == "ar":
                if want_ar:
                    rows.append(ar_rows[seed])
                    if keep_reports and ar_reports[seed] is not None:
                        reports_out[(key, seed)] = ar_reports[seed]
                continue
            row, reports, error = results[(key, seed)]
            if error is not None:
                failures.append((cell, seed, error))
                continue
            rows.append(row)
            if keep_reports and reports is not None:
                reports_out[(key, seed)] = reports
    return SweepResult(spec=spec, rows=rows, reports=reports_out, failures=failures)
