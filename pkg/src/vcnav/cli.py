"""Operator command-line surface: world generation, training, evaluation,
ablation, and raw plot-data export.

Every command reads one declarative JSON config (CLI flags override single
keys), writes all artifacts under its own --out directory, and records a
manifest with content hashes. Exit codes: 0 success, 2 configuration
problems, 3 training divergence, 4 artifact mismatches.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from .agent import CheckpointMismatch, load_checkpoint
from .benchmark import (SWITCH_GRID_FULL, render_report_table, run_ablation,
                        run_benchmark)
from .config import (ConfigError, RunConfig, Switches, canonical_json,
                     load_config, to_dict, validate)
from .manifest import verify_manifest, write_manifest
from .trainer import DivergenceDetected, train_joint
from .world import (World, build_dataset, generate_world, load_episodes,
                    load_world, save_episodes, save_world)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4

SPLITS = ("train", "val_seen", "val_unseen")


def _parse_switches(text: str) -> Switches:
    # accepts both the flag syntax "ml,cl_il" and report labels "ml+cl_il"
    names = [t.strip() for t in text.replace("+", ",").split(",") if t.strip()]
    unknown = set(names) - {"ml", "cl_il", "cl_rl"}
    if unknown:
        raise ConfigError(f"unknown switches: {sorted(unknown)}")
    if not names:
        raise ConfigError("at least one switch must stay on")
    return Switches(ml="ml" in names, cl_il="cl_il" in names, cl_rl="cl_rl" in names)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_world_dir(path: str | Path) -> tuple[World, dict[str, list]]:
    d = Path(path)
    world = load_world(d / "world.json")
    dataset = {s: load_episodes(d / f"episodes_{s}.json") for s in SPLITS}
    return world, dataset


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_world(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    world = generate_world(cfg.world, cfg.seed)
    dataset = build_dataset(world)
    save_world(world, out / "world.json")
    artifacts = [out / "world.json"]
    for split in SPLITS:
        p = out / f"episodes_{split}.json"
        save_episodes(dataset[split], p)
        artifacts.append(p)
    write_manifest(out, kind="world", seed=cfg.seed, config=to_dict(cfg),
                   artifacts=artifacts,
                   extra={"splits": {s: len(dataset[s]) for s in SPLITS}})
    print(f"world written to {out} "
          f"({len(world.scenes)} scenes, {sum(len(v) for v in dataset.values())} episodes)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.switches:
        cfg.train.switches = _parse_switches(args.switches)
    validate(cfg)
    world, dataset = _load_world_dir(args.world)
    out = _out_dir(args)
    result = train_joint(world, dataset, cfg, out_dir=out, resume_from=args.resume)
    artifacts = [result.checkpoint_path, out / "train_log.jsonl"]
    write_manifest(out, kind="train", seed=cfg.seed, config=to_dict(cfg),
                   artifacts=artifacts,
                   extra={"switches": cfg.train.switches.label(),
                          "iterations": cfg.train.iters})
    final = result.log[-1]
    print(f"trained {cfg.train.iters} iterations "
          f"(loss {final['loss']:.4f}); checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _write_trajectories(path: Path, report: dict) -> None:
    with open(path, "w") as f:
        for split, sub in report["splits"].items():
            for row in sub["rows"]:
                f.write(canonical_json({"split": split, **row}) + "\n")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    if args.tta_iters is not None:
        cfg.tta.iters = args.tta_iters
    validate(cfg)
    world, dataset = _load_world_dir(args.world)
    splits = tuple(s.strip() for s in args.split.split(",") if s.strip())
    seeds = _parse_seeds(args.seeds)
    out = _out_dir(args)
    report, diagnostics = run_benchmark(args.checkpoint, world, dataset, cfg,
                                        args.variant, seeds, splits=splits)
    (out / "report.json").write_text(canonical_json(report) + "\n")
    (out / "report_table.txt").write_text(render_report_table(report))
    _write_trajectories(out / "trajectories.jsonl", report)
    artifacts = [out / "report.json", out / "report_table.txt", out / "trajectories.jsonl"]
    if args.variant == "tta":
        (out / "diagnostics.json").write_text(canonical_json(diagnostics) + "\n")
        artifacts.append(out / "diagnostics.json")
    write_manifest(out, kind="eval", seed=seeds[0], config=to_dict(cfg),
                   artifacts=artifacts,
                   extra={"variant": args.variant, "seeds": list(seeds),
                          "checkpoint": str(args.checkpoint)})
    for split in splits:
        sr = report["splits"][split]["aggregate"]["SR"]
        print(f"{args.variant} {split}: SR {sr['mean']:.4f} ± {sr['std']:.4f}")
    return EXIT_OK


def _parse_grid(text: str):
    if text == "full":
        return SWITCH_GRID_FULL
    return tuple(_parse_switches(label) for label in text.split(","))


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    validate(cfg)
    world, dataset = _load_world_dir(args.world)
    out = _out_dir(args)
    report = run_ablation(world, dataset, cfg, grid=_parse_grid(args.grid),
                          seeds=_parse_seeds(args.seeds), out_dir=out,
                          progress=lambda m: print(m, flush=True))
    checkpoints = sorted(out.rglob("checkpoint_final.json"))
    write_manifest(out, kind="ablation", seed=cfg.seed, config=to_dict(cfg),
                   artifacts=[out / "ablation.json", out / "ablation_table.txt",
                              *checkpoints],
                   extra={"rows": [r["switches"] for r in report["rows"]]})
    print((out / "ablation_table.txt").read_text())
    return EXIT_OK


def _export_entropy(eval_dir: Path, out: Path) -> Path | None:
    diags_path = eval_dir / "diagnostics.json"
    if not diags_path.exists():
        return None
    diagnostics = json.loads(diags_path.read_text())
    series = []
    for split, per_seed in diagnostics.items():
        for entry in per_seed:
            for ep in entry["episodes"]:
                if ep.get("entropy"):
                    series.append({"split": split, "seed": entry["seed"],
                                   "episode_id": ep["episode_id"],
                                   "entropy": ep["entropy"]})
    traces = [s["entropy"] for s in series]
    mean_trace = (np.mean([t for t in traces], axis=0).tolist() if traces else [])
    path = out / "entropy_vs_step.json"
    path.write_text(canonical_json({"mean": mean_trace, "episodes": series}) + "\n")
    return path


def _export_bird_view(eval_dir: Path, world: World, dataset: dict, out: Path) -> Path:
    by_id = {ep.episode_id: ep for split in dataset.values() for ep in split}
    rows = []
    with open(eval_dir / "trajectories.jsonl") as f:
        for line in f:
            rows.append(json.loads(line))
    view = []
    for row in rows:
        ep = by_id.get(row["episode_id"])
        if ep is None:
            continue
        pos = world.scene(ep.scene_id).positions
        view.append({
            "episode_id": ep.episode_id, "scene_id": ep.scene_id,
            "seed": row.get("seed"), "split": row["split"],
            "gt": [[float(x) for x in pos[n]] for n in ep.gt_path],
            "executed": [[float(x) for x in pos[n]] for n in row["nodes"]],
            "SR": row["SR"],
        })
    path = out / "bird_view.json"
    path.write_text(canonical_json(view) + "\n")
    return path


def _export_shift_sweep(args, cfg: RunConfig, out: Path) -> Path:
    from .trainer import evaluate_policy
    grid = [float(t) for t in args.shift_grid.split(",") if t.strip()]
    params, _, _, _ = load_checkpoint(args.checkpoint)
    series = []
    for sigma in grid:
        wcfg = copy.deepcopy(cfg.world)
        wcfg.sigma_shift = sigma
        shifted = generate_world(wcfg, cfg.seed)
        episodes = build_dataset(shifted)["val_unseen"][:cfg.train.eval_episodes]
        _, agg = evaluate_policy(params, shifted, episodes)
        series.append({"sigma_shift": sigma, **agg})
    path = out / "sr_vs_shift.json"
    path.write_text(canonical_json(series) + "\n")
    return path


def cmd_export_plots(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    written = []
    if args.eval_dir:
        if not args.world:
            raise ConfigError("--eval-dir export needs --world for coordinates")
        eval_dir = Path(args.eval_dir)
        world, dataset = _load_world_dir(args.world)
        p = _export_entropy(eval_dir, out)
        if p:
            written.append(p)
        written.append(_export_bird_view(eval_dir, world, dataset, out))
    if args.checkpoint:
        written.append(_export_shift_sweep(args, cfg, out))
    if not written:
        raise ConfigError("nothing to export: pass --eval-dir and/or --checkpoint")
    write_manifest(out, kind="plots", seed=cfg.seed, config=to_dict(cfg),
                   artifacts=written)
    print("wrote " + ", ".join(p.name for p in written))
    return EXIT_OK


def cmd_verify(args) -> int:
    problems = verify_manifest(args.path)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_MISMATCH
    print("manifest ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vcnav",
        description="Instruction-following navigation with test-time visual-consistency adaptation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("world", help="generate scenes and episode splits")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_world)

    p = sub.add_parser("train", help="stage-1 joint training")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--world", required=True, help="directory written by `vcnav world`")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--switches", default=None,
                   help="subset of ml,cl_il,cl_rl (comma or + separated)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a variant")
    p.add_argument("checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val_seen,val_unseen")
    p.add_argument("--variant", choices=("base", "nnc", "tta"), default="tta")
    p.add_argument("--tta-iters", type=int, default=None)
    p.add_argument("--seeds", default="0")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a switch grid")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="full",
                   help="'full' or comma list of combos like ml+cl_il")
    p.add_argument("--seeds", default="0")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-plots", help="emit raw data series for figures")
    p.add_argument("--config", default=None)
    p.add_argument("--eval-dir", default=None, help="directory written by `vcnav eval`")
    p.add_argument("--world", default=None)
    p.add_argument("--checkpoint", default=None, help="enables the shift sweep")
    p.add_argument("--shift-grid", default="0.0,0.25,0.5,0.75,1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_plots)

    p = sub.add_parser("verify", help="check a manifest's artifact hashes")
    p.add_argument("path")
    p.set_defaults(fn=cmd_verify)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceDetected as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointMismatch, FileNotFoundError) as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
