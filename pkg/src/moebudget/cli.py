"""Command-line entry point: wires experiment configs to the simulator and
analysis modules and emits every artifact deterministically.

Configuration precedence is CLI flag > config file > built-in default. Every
output file starts with a header block carrying the tool version, the full
config echo, and the master seed, so results are self-describing; reruns of
the same config produce byte-identical files at any worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    coactivation,
    concentration_ratio,
    coverage_curve,
    expected_pair_probability,
    pareto_table,
    read_trace,
    reconstruction_analysis,
)
from .budgeting import calibrate_static, save_static_ranking
from .coverage import CoveragePolicy
from .draft_tree import binary_branching, build_tree, tree_routing
from .numerics import Rng
from .simulator import (
    CALIB_STREAM,
    PROMPT_STREAM,
    CostModelParams,
    SweepCell,
    SweepSpec,
    build_model_pair,
    default_calibration,
    sweep,
)
from .toy_model import (
    DraftSpec,
    ModelConfig,
    PRESETS,
    preset_config,
    random_tokens,
    save_model,
)

DEFAULT_TREE_SIZES = (3, 7, 15, 31, 63, 127, 255)
ANALYSIS_STREAM = 103


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    preset: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    draft: DraftSpec = field(default_factory=DraftSpec)
    tree_size: int = 63
    tree_sizes: tuple[int, ...] = DEFAULT_TREE_SIZES
    budgets: tuple[int, ...] = (8, 16, 24, 32, 40, 48, 56)
    methods: tuple[str, ...] = ("router",)
    policies: tuple[str, ...] = ("substitution",)
    seeds: tuple[int, ...] = ()
    prompts: int = 4
    gen_len: int = 64
    context_len: int = 16
    trees: int = 20
    cost: CostModelParams = field(default_factory=CostModelParams)
    uses_raw_g: bool = True
    out_dir: str = "out"
    workers: int = 1

    def eval_seeds(self) -> tuple[int, ...]:
        return self.seeds if self.seeds else tuple(range(self.prompts))

    def validate(self) -> None:
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        try:
            self.draft.validate(self.model.n_layers)
        except ValueError as exc:
            raise ConfigError(f"draft: {exc}") from exc
        try:
            self.cost.validate()
        except ValueError as exc:
            raise ConfigError(f"cost: {exc}") from exc
        if not self.budgets:
            raise ConfigError("budgets: list must not be empty")
        if any(b < 1 for b in self.budgets):
            raise ConfigError("budgets: every budget must be >= 1")
        if not self.methods:
            raise ConfigError("methods: list must not be empty")
        for m in self.methods:
            if m not in ("static", "router", "oracle"):
                raise ConfigError(f"methods: unknown ranking method {m!r}")
        if not self.policies:
            raise ConfigError("policies: list must not be empty")
        for p in self.policies:
            try:
                CoveragePolicy(p)
            except ValueError as exc:
                raise ConfigError(f"policies: {exc}") from exc
        if not self.tree_sizes:
            raise ConfigError("tree_sizes: list must not be empty")
        for size in (self.tree_size, *self.tree_sizes):
            try:
                binary_branching(size)
            except ValueError as exc:
                raise ConfigError(f"tree_size: {exc}") from exc
        if self.gen_len < 1:
            raise ConfigError("gen_len: must be >= 1")
        if self.prompts < 1 and not self.seeds:
            raise ConfigError("prompts: must be >= 1 when seeds is empty")
        if self.context_len < 1:
            raise ConfigError("context_len: must be >= 1")
        if self.trees < 1:
            raise ConfigError("trees: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "model": dataclasses.asdict(self.model),
            "draft": dataclasses.asdict(self.draft),
            "tree_size": self.tree_size,
            "tree_sizes": list(self.tree_sizes),
            "budgets": list(self.budgets),
            "methods": list(self.methods),
            "policies": list(self.policies),
            "seeds": list(self.seeds),
            "prompts": self.prompts,
            "gen_len": self.gen_len,
            "context_len": self.context_len,
            "trees": self.trees,
            "cost": dataclasses.asdict(self.cost),
            "uses_raw_g": self.uses_raw_g,
            "out_dir": self.out_dir,
            "workers": self.workers,
        }


_LIST_FIELDS = {"tree_sizes", "budgets", "methods", "policies", "seeds"}
_INT_FIELDS = {"tree_size", "prompts", "gen_len", "context_len", "trees", "workers"}


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Merge defaults, an optional JSON config file, and CLI overrides."""
    data: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
    merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}

    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in merged:
        if key not in known:
            raise ConfigError(f"{key}: unknown configuration field")

    preset = merged.get("preset")
    model_kwargs = dict(merged.get("model") or {})
    if "seed" in merged:  # master seed shortcut folded into the model config
        raise ConfigError("seed: set model.seed or use the --seed flag")
    base_model = ModelConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base_model = preset_config(preset)
    try:
        model = dataclasses.replace(base_model, **model_kwargs)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc

    try:
        draft = DraftSpec(**(merged.get("draft") or {}))
    except TypeError as exc:
        raise ConfigError(f"draft: {exc}") from exc
    try:
        cost = CostModelParams(**(merged.get("cost") or {}))
    except TypeError as exc:
        raise ConfigError(f"cost: {exc}") from exc

    kwargs: dict = {"preset": preset, "model": model, "draft": draft, "cost": cost}
    for name in known - {"preset", "model", "draft", "cost"}:
        if name in merged:
            value = merged[name]
            if name in _LIST_FIELDS:
                value = tuple(value)
            kwargs[name] = value
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Deterministic file output
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def _config_echo(config: ExperimentConfig) -> str:
    return json.dumps(config.to_json(), sort_keys=True)


def _header_lines(command: str, config: ExperimentConfig) -> list[str]:
    return [
        f"# moebudget {__version__}",
        f"# command: {command}",
        f"# master_seed: {config.model.seed}",
        f"# config: {_config_echo(config)}",
    ]


def write_csv(path: Path, command: str, config: ExperimentConfig, columns, rows) -> None:
    lines = _header_lines(command, config)
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, command: str, config: ExperimentConfig, payload: dict) -> None:
    doc = {
        "header": {
            "tool": f"moebudget {__version__}",
            "command": command,
            "master_seed": config.model.seed,
            "config": config.to_json(),
        },
        **payload,
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


SWEEP_COLUMNS = (
    "mode",
    "method",
    "policy",
    "budget",
    "tree_size",
    "seed",
    "tokens",
    "steps",
    "mean_tau",
    "mean_unique_experts",
    "max_unique_experts",
    "total_cost",
    "speedup",
    "ar_match_rate",
)

PARETO_COLUMNS = ("mode", "method", "policy", "budget", "tree_size", "speedup", "quality_pct")

COVERAGE_COLUMNS = ("layer", "budget", "coverage_mean", "coverage_std", "records")

COACTIVATION_COLUMNS = (
    "layer",
    "tokens",
    "expected_pair_probability",
    "max_pair_count",
    "concentration",
)

RECONSTRUCT_COLUMNS = ("method", "budget", "mode", "trees", "error_mean", "error_std")


def _sweep_rows_as_dicts(rows) -> list[dict]:
    out = []
    for r in rows:
        out.append(
            {
                "mode": r.cell.mode,
                "method": r.cell.method or "",
                "policy": r.cell.policy or "",
                "budget": r.cell.budget if r.cell.budget is not None else "",
                "tree_size": r.cell.tree_size,
                "seed": r.seed,
                "tokens": r.tokens,
                "steps": r.steps,
                "mean_tau": r.mean_tau,
                "mean_unique_experts": r.mean_unique_experts,
                "max_unique_experts": r.max_unique_experts,
                "total_cost": r.total_cost,
                "speedup": r.speedup,
                "ar_match_rate": r.ar_match_rate,
            }
        )
    return out


def _summarize_cells(rows) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault(r.cell.key(), []).append(r)
    out = []
    for key in sorted(groups):
        group = groups[key]
        cell = group[0].cell
        out.append(
            {
                "mode": cell.mode,
                "method": cell.method,
                "policy": cell.policy,
                "budget": cell.budget,
                "tree_size": cell.tree_size,
                "seeds": len(group),
                "speedup_mean": float(np.mean([r.speedup for r in group])),
                "speedup_std": float(np.std([r.speedup for r in group])),
                "mean_tau": float(np.mean([r.mean_tau for r in group])),
                "mean_unique_experts": float(np.mean([r.mean_unique_experts for r in group])),
                "ar_match_rate_mean": float(np.mean([r.ar_match_rate for r in group])),
            }
        )
    return out


def _run_sweep_command(command: str, config: ExperimentConfig, cells) -> int:
    spec = SweepSpec(
        model_config=config.model,
        draft_spec=config.draft,
        cells=tuple(cells),
        seeds=config.eval_seeds(),
        gen_len=config.gen_len,
        context_len=config.context_len,
        cost=config.cost,
        uses_raw_g=config.uses_raw_g,
    )
    result = sweep(spec, workers=config.workers, strict=False)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(
        out_dir / f"{command}.csv",
        command,
        config,
        SWEEP_COLUMNS,
        _sweep_rows_as_dicts(result.rows),
    )
    write_csv(
        out_dir / f"{command}_pareto.csv",
        command,
        config,
        PARETO_COLUMNS,
        pareto_table(result.rows),
    )
    write_json(
        out_dir / f"{command}_summary.json",
        command,
        config,
        {"cells": _summarize_cells(result.rows)},
    )
    for r in result.rows:
        print(
            f"[{command}] {r.cell.mode} method={r.cell.method or '-'} "
            f"policy={r.cell.policy or '-'} B={r.cell.budget or '-'} "
            f"M={r.cell.tree_size} seed={r.seed}: speedup={r.speedup:.3f} "
            f"tau={r.mean_tau:.2f} match={r.ar_match_rate:.3f}",
            file=sys.stderr,
        )
    if result.failures:
        for cell, seed, err in result.failures:
            print(f"FAILED cell {cell} seed {seed}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_simulate(config: ExperimentConfig) -> int:
    """Tree-size sweep: AR baseline, full verification, and budgeted
    verification at each configured budget."""
    cells = [SweepCell(mode="ar")]
    for size in config.tree_sizes:
        cells.append(SweepCell(mode="spec_full", tree_size=size))
        for budget in config.budgets:
            cells.append(
                SweepCell(
                    mode="spec_budgeted",
                    tree_size=size,
                    method=config.methods[0],
                    policy=config.policies[0],
                    budget=budget,
                )
            )
    return _run_sweep_command("simulate", config, cells)


def cmd_ablate(config: ExperimentConfig) -> int:
    """Design-space grid at a fixed tree size: every ranking method crossed
    with every coverage policy and budget."""
    cells = [SweepCell(mode="ar"), SweepCell(mode="spec_full", tree_size=config.tree_size)]
    for method in config.methods:
        for policy in config.policies:
            for budget in config.budgets:
                cells.append(
                    SweepCell(
                        mode="spec_budgeted",
                        tree_size=config.tree_size,
                        method=method,
                        policy=policy,
                        budget=budget,
                    )
                )
    return _run_sweep_command("ablate", config, cells)


def _collect_tree_records(config: ExperimentConfig) -> dict[int, dict[str, np.ndarray]]:
    """Routing records of `trees` seeded draft trees under the full target."""
    target, draft = build_model_pair(config.model, config.draft)
    branching = binary_branching(config.tree_size)
    probs: dict[int, list] = {li: [] for li in range(target.n_layers)}
    selected: dict[int, list] = {li: [] for li in range(target.n_layers)}
    rng = Rng(config.model.seed).substream(ANALYSIS_STREAM)
    for t in range(config.trees):
        ctx = random_tokens(rng.substream(t), config.context_len, config.model.vocab_size)
        tree = build_tree(draft, ctx, branching)
        routing = tree_routing(target, ctx, tree)
        for li in range(target.n_layers):
            probs[li].append(routing.probs[li])
            selected[li].append(routing.selected[li])
    return {
        li: {
            "probs_per_tree": probs[li],
            "probs": np.concatenate(probs[li]),
            "selected": np.concatenate(selected[li]),
        }
        for li in probs
    }


def _load_records(config: ExperimentConfig, trace: str | None):
    if trace is not None:
        parsed = read_trace(trace, config.model.n_experts, k=config.model.top_k)
        return {
            li: {
                "probs_per_tree": [rec["probs"]],
                "probs": rec["probs"],
                "selected": rec["selected"],
            }
            for li, rec in parsed.items()
        }
    return _collect_tree_records(config)


def cmd_coverage(config: ExperimentConfig, trace: str | None = None) -> int:
    """Cumulative routing-probability coverage by expert budget, per layer."""
    records = _load_records(config, trace)
    rows = []
    for li in sorted(records):
        curves = np.stack(
            [coverage_curve(p, li).values for p in records[li]["probs_per_tree"]]
        )
        for b in range(curves.shape[1]):
            rows.append(
                {
                    "layer": li,
                    "budget": b + 1,
                    "coverage_mean": float(curves[:, b].mean()),
                    "coverage_std": float(curves[:, b].std()),
                    "records": curves.shape[0],
                }
            )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "coverage.csv", "coverage", config, COVERAGE_COLUMNS, rows)
    return 0


def cmd_coactivation(config: ExperimentConfig, trace: str | None = None) -> int:
    """Pairwise expert co-activation counts and the concentration ratio of
    the most frequent pair against uniform-random expectation."""
    records = _load_records(config, trace)
    n = config.model.n_experts
    k = config.model.top_k
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for li in sorted(records):
        mat = coactivation(records[li]["selected"], n, layer=li)
        off = mat.counts.copy()
        np.fill_diagonal(off, 0)
        summary_rows.append(
            {
                "layer": li,
                "tokens": mat.tokens_observed,
                "expected_pair_probability": float(expected_pair_probability(n, k)),
                "max_pair_count": int(off.max()),
                "concentration": concentration_ratio(mat, k),
            }
        )
        lines = _header_lines("coactivation", config)
        lines.append(f"# layer: {li}")
        for row in mat.counts:
            lines.append(",".join(str(int(v)) for v in row))
        (out_dir / f"coactivation_layer{li}.csv").write_text("\n".join(lines) + "\n")
    write_csv(
        out_dir / "coactivation_summary.csv",
        "coactivation",
        config,
        COACTIVATION_COLUMNS,
        summary_rows,
    )
    return 0


def cmd_reconstruct(config: ExperimentConfig) -> int:
    """Teacher-forced reconstruction error per ranking method and budget,
    averaged over layers and seeded trees."""
    target, draft = build_model_pair(config.model, config.draft)
    static_counts = None
    if "static" in config.methods:
        static_counts = default_calibration(
            target, Rng(config.model.seed).substream(CALIB_STREAM)
        )
    errors = reconstruction_analysis(
        target,
        draft,
        methods=config.methods,
        budgets=config.budgets,
        n_trees=config.trees,
        tree_size=config.tree_size,
        context_len=config.context_len,
        rng=Rng(config.model.seed).substream(ANALYSIS_STREAM),
        mode="raw",
        static_counts=static_counts,
        uses_raw_g=config.uses_raw_g,
    )
    rows = []
    for method in config.methods:
        for budget in config.budgets:
            errs = errors[(method, int(budget))]
            rows.append(
                {
                    "method": method,
                    "budget": int(budget),
                    "mode": "raw",
                    "trees": len(errs),
                    "error_mean": float(np.mean(errs)),
                    "error_std": float(np.std(errs)),
                }
            )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "reconstruct.csv", "reconstruct", config, RECONSTRUCT_COLUMNS, rows)
    return 0


def cmd_calibrate_static(config: ExperimentConfig) -> int:
    """Selection-frequency calibration and the fixed expert ordering it
    induces, exportable for pruned deployments."""
    target, _ = build_model_pair(config.model, config.draft)
    counts = default_calibration(target, Rng(config.model.seed).substream(CALIB_STREAM))
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_static_ranking(counts, out_dir / "static_ranking.json")
    return 0


def cmd_export_model(config: ExperimentConfig) -> int:
    """Build the target and draft models and write them to disk."""
    target, draft = build_model_pair(config.model, config.draft)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(target, out_dir / "target.moem")
    save_model(draft, out_dir / "draft.moem")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moebudget",
        description="Expert-budgeted speculative decoding laboratory",
    )
    parser.add_argument("--version", action="version", version=f"moebudget {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, trace: bool = False):
        p.add_argument("--config", help="JSON experiment config file")
        p.add_argument("--seed", type=int, help="master seed (model weights and streams)")
        p.add_argument("--workers", type=int, help="parallel sweep workers")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--preset", choices=sorted(PRESETS), help="model shape preset")
        p.add_argument("--budget", type=_int_list, help="comma-separated expert budgets")
        p.add_argument("--method", type=_str_list, help="ranking methods (static,router,oracle)")
        p.add_argument("--policy", type=_str_list, help="coverage policies (truncation,substitution)")
        p.add_argument("--tree-size", type=_int_list, help="draft tree sizes (2^j - 1)")
        p.add_argument("--gen-len", type=int, help="tokens to generate per run")
        p.add_argument("--prompts", type=int, help="number of evaluation prompts")
        p.add_argument("--trees", type=int, help="trees per analysis")
        if trace:
            p.add_argument("--trace", help="external routing trace (JSON lines)")

    add_common(sub.add_parser("simulate", help="tree-size sweep with budgeted verification"))
    add_common(sub.add_parser("ablate", help="method x policy x budget grid"))
    add_common(sub.add_parser("coverage", help="routing-probability coverage curves"), trace=True)
    add_common(sub.add_parser("coactivation", help="expert co-activation analysis"), trace=True)
    add_common(sub.add_parser("reconstruct", help="teacher-forced reconstruction error"))
    add_common(sub.add_parser("calibrate-static", help="static ranking calibration"))
    add_common(sub.add_parser("export-model", help="write target and draft model files"))
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["model"] = {"seed": args.seed}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.budget is not None:
        overrides["budgets"] = args.budget
    if args.method is not None:
        overrides["methods"] = args.method
    if args.policy is not None:
        overrides["policies"] = args.policy
    if args.tree_size is not None:
        overrides["tree_sizes"] = args.tree_size
        if len(args.tree_size) == 1:
            overrides["tree_size"] = args.tree_size[0]
    if args.gen_len is not None:
        overrides["gen_len"] = args.gen_len
    if args.prompts is not None:
        overrides["prompts"] = args.prompts
    if args.trees is not None:
        overrides["trees"] = args.trees
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _overrides_from_args(args)
        # The model override must merge on top of any config-file model block.
        config_file = args.config
        file_model = {}
        if config_file:
            try:
                with open(config_file) as f:
                    file_model = (json.load(f) or {}).get("model") or {}
            except (OSError, json.JSONDecodeError) as exc:
                print(f"error: config: cannot read {config_file}: {exc}", file=sys.stderr)
                return 2
        if "model" in overrides:
            overrides["model"] = {**file_model, **overrides["model"]}
        config = load_config(config_file, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "simulate":
            return cmd_simulate(config)
        if args.command == "ablate":
            return cmd_ablate(config)
        if args.command == "coverage":
            return cmd_coverage(config, getattr(args, "trace", None))
        if args.command == "coactivation":
            return cmd_coactivation(config, getattr(args, "trace", None))
        if args.command == "reconstruct":
            return cmd_reconstruct(config)
        if args.command == "calibrate-static":
            return cmd_calibrate_static(config)
        if args.command == "export-model":
            return cmd_export_model(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
