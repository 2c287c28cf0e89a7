"""Variant comparisons, ablation grids, and serialized metric reports.

Three evaluation variants mirror the method's comparison structure:
``base`` is a model trained without the contrastive terms and run greedily,
``nnc`` is the contrastively trained model frozen at test time, and ``tta``
additionally adapts the self-supervised partition on each test episode.
Reports carry per-seed and seed-averaged numbers (mean and population std)
and serialize to canonical JSON, so identical inputs give identical bytes.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Callable, Sequence

from .agent import AgentParams, CheckpointMismatch, KeyQueue, load_checkpoint
from .config import ConfigError, RunConfig, Switches, canonical_json, model_hash, to_dict
from .metrics import METRIC_NAMES
from .trainer import evaluate_policy, evaluate_tta, train_joint
from .world import Episode, World, world_fingerprint

REPORT_FORMAT = 1
VARIANTS = ("base", "nnc", "tta")

# Table-3-shaped grid: every non-empty switch combination, full model last
SWITCH_GRID_FULL = (
    Switches(ml=True, cl_il=False, cl_rl=False),
    Switches(ml=False, cl_il=True, cl_rl=False),
    Switches(ml=False, cl_il=False, cl_rl=True),
    Switches(ml=False, cl_il=True, cl_rl=True),
    Switches(ml=True, cl_il=True, cl_rl=False),
    Switches(ml=True, cl_il=False, cl_rl=True),
    Switches(ml=True, cl_il=True, cl_rl=True),
)


def _with(cfg: RunConfig, *, seed: int | None = None,
          switches: Switches | None = None) -> RunConfig:
    out = copy.deepcopy(cfg)
    if seed is not None:
        out.seed = seed
    if switches is not None:
        out.train.switches = switches
    return out


def _eval_subsets(dataset: dict[str, list[Episode]], splits: Sequence[str],
                  limit: int) -> dict[str, list[Episode]]:
    subsets = {}
    for split in splits:
        eps = dataset.get(split)
        if not eps:
            raise ConfigError(f"split {split!r} is empty")
        subsets[split] = eps[:limit]
    return subsets


def evaluate_variant(params: AgentParams, queue: KeyQueue, world: World,
                     episodes: Sequence[Episode], cfg: RunConfig, variant: str,
                     seed: int) -> tuple[list[dict], dict, list[dict]]:
    """Rows, aggregate, and adaptation diagnostics (empty for frozen variants)."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant in ("base", "nnc"):
        rows, agg = evaluate_policy(params, world, episodes)
        return rows, agg, []
    return evaluate_tta(params, queue, world, episodes, cfg, seed)


def summarize_over_seeds(per_seed: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Mean and population standard deviation per metric across seeds."""
    if not per_seed:
        raise ValueError("no per-seed aggregates to summarize")
    out = {}
    for name in METRIC_NAMES:
        vals = [row[name] for row in per_seed]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out[name] = {"mean": mean, "std": math.sqrt(var)}
    return out


def _variant_switch_check(variant: str, label: str) -> None:
    if variant == "base" and label != "ml":
        raise CheckpointMismatch(
            f"base variant expects a checkpoint trained with switches 'ml', got {label!r}")
    if variant in ("nnc", "tta") and not ("cl_il" in label and "cl_rl" in label):
        raise CheckpointMismatch(
            f"{variant} variant expects a contrastively trained checkpoint, got {label!r}")


def run_benchmark(checkpoint: str | Path, world: World, dataset: dict[str, list[Episode]],
                  cfg: RunConfig, variant: str, seeds: Sequence[int],
                  splits: Sequence[str] = ("val_seen", "val_unseen"),
                  ) -> tuple[dict, dict]:
    """Evaluate one checkpoint under a variant across seeds.

    Episode sets are fixed per split (the same prefix used for training-time
    validation), identical for every variant and seed. Returns the metrics
    report and, separately, per-episode adaptation diagnostics keyed by
    split (empty lists for frozen variants) so that reports of equivalent
    variants compare equal byte for byte.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    params, queue, _, meta = load_checkpoint(
        checkpoint, expected_model_hash=model_hash(cfg),
        expected_world=world_fingerprint(world))
    _variant_switch_check(variant, meta.get("switches", ""))
    subsets = _eval_subsets(dataset, splits, cfg.train.eval_episodes)

    split_reports: dict[str, dict] = {}
    diagnostics: dict[str, list] = {}
    for split, episodes in subsets.items():
        per_seed_aggs, all_rows, split_diags = [], [], []
        for seed in seeds:
            rows, agg, diags = evaluate_variant(params, queue, world, episodes, cfg,
                                                variant, seed)
            per_seed_aggs.append({"seed": seed, **agg})
            all_rows.extend({"seed": seed, **row} for row in rows)
            split_diags.append({"seed": seed, "episodes": diags})
        split_reports[split] = {
            "aggregate": summarize_over_seeds(per_seed_aggs),
            "per_seed": per_seed_aggs,
            "rows": all_rows,
        }
        diagnostics[split] = split_diags

    report = {
        "kind": "metrics_report",
        "format_version": REPORT_FORMAT,
        "variant": variant,
        "config_hash": model_hash(cfg),
        "world_fingerprint": world_fingerprint(world),
        "checkpoint_switches": meta.get("switches"),
        "seeds": list(seeds),
        "tta_iters": cfg.tta.iters if variant == "tta" else None,
        "splits": split_reports,
    }
    return report, diagnostics


def run_variant_comparison(world: World, dataset: dict[str, list[Episode]], cfg: RunConfig,
                           seeds: Sequence[int],
                           splits: Sequence[str] = ("val_seen", "val_unseen"),
                           out_dir: str | Path | None = None,
                           progress: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate all three variants per seed; the core comparison.

    Per seed, a contrastive-free model is trained for ``base`` and a full
    model for ``nnc``/``tta``; every variant is evaluated on identical
    episode subsets. Adaptation diagnostics (entropy before/after per
    episode) ride along for descent analysis.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    subsets = _eval_subsets(dataset, splits, cfg.train.eval_episodes)
    out_path = Path(out_dir) if out_dir is not None else None

    per_variant: dict[str, dict[str, list[dict]]] = {
        v: {s: [] for s in subsets} for v in VARIANTS}
    adaptation: list[dict] = []
    say = progress or (lambda msg: None)

    for seed in seeds:
        base_cfg = _with(cfg, seed=seed, switches=Switches(ml=True, cl_il=False, cl_rl=False))
        full_cfg = _with(cfg, seed=seed, switches=Switches(ml=True, cl_il=True, cl_rl=True))
        base_dir = out_path / f"seed{seed}" / "base" if out_path else None
        full_dir = out_path / f"seed{seed}" / "full" if out_path else None
        say(f"seed {seed}: training base model")
        base = train_joint(world, dataset, base_cfg, out_dir=base_dir)
        say(f"seed {seed}: training full model")
        full = train_joint(world, dataset, full_cfg, out_dir=full_dir)

        for split, episodes in subsets.items():
            _, agg_base, _ = evaluate_variant(base.params, base.queue, world, episodes,
                                              base_cfg, "base", seed)
            _, agg_nnc, _ = evaluate_variant(full.params, full.queue, world, episodes,
                                             full_cfg, "nnc", seed)
            say(f"seed {seed}: adapting on {split}")
            _, agg_tta, diags = evaluate_variant(full.params, full.queue, world, episodes,
                                                 full_cfg, "tta", seed)
            per_variant["base"][split].append({"seed": seed, **agg_base})
            per_variant["nnc"][split].append({"seed": seed, **agg_nnc})
            per_variant["tta"][split].append({"seed": seed, **agg_tta})
            if split == "val_unseen":
                adaptation.append({"seed": seed, "episodes": diags})

    variants_report = {
        v: {s: {"aggregate": summarize_over_seeds(v_aggs), "per_seed": v_aggs}
            for s, v_aggs in split_map.items()}
        for v, split_map in per_variant.items()}

    unseen = {v: variants_report[v]["val_unseen"]["aggregate"]["SR"]["mean"]
              for v in VARIANTS} if "val_unseen" in subsets else {}
    report = {
        "kind": "variant_comparison",
        "format_version": REPORT_FORMAT,
        "config": to_dict(cfg),
        "config_hash": model_hash(cfg),
        "world_fingerprint": world_fingerprint(world),
        "seeds": list(seeds),
        "variants": variants_report,
        "orderings": {
            "val_unseen_SR": unseen,
            "tta_ge_nnc": unseen.get("tta", 0.0) >= unseen.get("nnc", 0.0) if unseen else None,
            "nnc_ge_base": unseen.get("nnc", 0.0) >= unseen.get("base", 0.0) if unseen else None,
            "tta_minus_base": (unseen["tta"] - unseen["base"]) if unseen else None,
        },
        "adaptation": adaptation,
    }
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "comparison.json").write_text(canonical_json(report) + "\n")
        (out_path / "comparison_table.txt").write_text(render_comparison_table(report))
    return report


def descent_fraction(adaptation: Sequence[dict]) -> tuple[float, int]:
    """Fraction of adapted episodes whose paired view entropy decreased.

    Accepts the ``adaptation`` list of a comparison report or one split's
    entry from run_benchmark diagnostics (same shape: per-seed dicts with an
    ``episodes`` list).
    """
    down = total = 0
    for entry in adaptation:
        for ep in entry["episodes"]:
            if ep.get("entropy_after") is None:
                continue
            total += 1
            down += ep["entropy_after"] < ep["entropy_before"]
    return (down / total if total else 0.0), total


def run_ablation(world: World, dataset: dict[str, list[Episode]], cfg: RunConfig,
                 grid: Sequence[Switches] | None = None, seeds: Sequence[int] = (0,),
                 splits: Sequence[str] = ("val_seen", "val_unseen"),
                 out_dir: str | Path | None = None,
                 progress: Callable[[str], None] | None = None) -> dict:
    """Train one model per switch combination and evaluate each with adaptation.

    Every row is tested under the same protocol as the full model (per-episode
    adaptation), so differences isolate the training-time objective terms.
    """
    grid = tuple(grid) if grid is not None else SWITCH_GRID_FULL
    if not grid:
        raise ConfigError("ablation grid is empty")
    for sw in grid:
        if not (sw.ml or sw.cl_il or sw.cl_rl):
            raise ConfigError("ablation grid contains the all-off combination")
    if not seeds:
        raise ConfigError("need at least one seed")
    subsets = _eval_subsets(dataset, splits, cfg.train.eval_episodes)
    out_path = Path(out_dir) if out_dir is not None else None
    say = progress or (lambda msg: None)

    rows = []
    for sw in grid:
        label = sw.label()
        split_aggs: dict[str, list[dict]] = {s: [] for s in subsets}
        for seed in seeds:
            run_cfg = _with(cfg, seed=seed, switches=sw)
            run_dir = out_path / label.replace("+", "_") / f"seed{seed}" if out_path else None
            say(f"{label}: training seed {seed}")
            trained = train_joint(world, dataset, run_cfg, out_dir=run_dir)
            for split, episodes in subsets.items():
                say(f"{label}: adapting seed {seed} on {split}")
                _, agg, _ = evaluate_tta(trained.params, trained.queue, world, episodes,
                                         run_cfg, seed)
                split_aggs[split].append({"seed": seed, **agg})
        rows.append({
            "switches": label,
            **{split: {"aggregate": summarize_over_seeds(aggs), "per_seed": aggs}
               for split, aggs in split_aggs.items()},
        })

    report = {
        "kind": "ablation",
        "format_version": REPORT_FORMAT,
        "config": to_dict(cfg),
        "config_hash": model_hash(cfg),
        "world_fingerprint": world_fingerprint(world),
        "seeds": list(seeds),
        "rows": rows,
    }
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "ablation.json").write_text(canonical_json(report) + "\n")
        (out_path / "ablation_table.txt").write_text(render_ablation_table(report))
    return report


# -- table rendering ---------------------------------------------------------------


def _fmt_cell(stats: dict[str, float]) -> str:
    return f"{stats['mean']:.3f}±{stats['std']:.3f}"


def _render(headers: list[str], body: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), rule] + [line(r) for r in body]) + "\n"


def render_report_table(report: dict) -> str:
    """Single-checkpoint report: one row per split."""
    headers = ["split"] + list(METRIC_NAMES)
    body = [[split] + [_fmt_cell(sub["aggregate"][m]) for m in METRIC_NAMES]
            for split, sub in report["splits"].items()]
    return _render(headers, body)


def render_comparison_table(report: dict) -> str:
    """Variant rows by split, one metric column per navigation metric."""
    headers = ["variant", "split"] + list(METRIC_NAMES)
    body = []
    for variant in VARIANTS:
        for split, sub in report["variants"][variant].items():
            body.append([variant, split] +
                        [_fmt_cell(sub["aggregate"][m]) for m in METRIC_NAMES])
    return _render(headers, body)


def render_ablation_table(report: dict) -> str:
    headers = ["switches", "split"] + list(METRIC_NAMES)
    body = []
    for row in report["rows"]:
        for split in sorted(k for k in row if k not in ("switches",)):
            body.append([row["switches"], split] +
                        [_fmt_cell(row[split]["aggregate"][m]) for m in METRIC_NAMES])
    return _render(headers, body)
