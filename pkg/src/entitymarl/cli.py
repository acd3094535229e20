"""Batch experiment front door: train / eval / ablate / transfer.

Every run writes a self-describing directory (resolved config, code-version
stamp, seed, metrics JSONL, checkpoint) so results reproduce bitwise from the
directory contents alone on the same machine.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .arena import ArenaConfig
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    dump_config,
    from_dict,
)
from .policy import ABLATIONS, ModelConfig
from .training import (
    CheckpointError,
    TrainConfig,
    config_hash,
    evaluate,
    restore_model,
    train,
)

import yaml

log = logging.getLogger("entitymarl")


def _setup_logging() -> None:
    level = os.environ.get("ENTITYMARL_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")


def _load_config(path: str, overrides: Sequence[str]) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raise ConfigError(f"empty config file {path}")
    if overrides:
        raw = apply_overrides(raw, list(overrides))
    return from_dict(raw)


def _run_dir(out_dir: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(out_dir) / f"run-{stamp}-seed{seed}"
    suffix = 0
    while path.exists():
        suffix += 1
        path = Path(out_dir) / f"run-{stamp}-seed{seed}.{suffix}"
    path.mkdir(parents=True)
    return path


def _write_run_info(run_dir: Path, cfg: ExperimentConfig) -> str:
    fingerprint = config_hash(cfg.resolved())
    info = {
        "version": __version__,
        "config_hash": fingerprint,
        "seed": cfg.train.seed,
    }
    with open(run_dir / "run_info.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    dump_config(cfg, run_dir / "config.yaml")
    return fingerprint


def _train_once(
    cfg: ExperimentConfig,
    run_dir: Path,
    warm_start: Optional[Path] = None,
    stop_return: Optional[float] = None,
) -> Dict[str, object]:
    fingerprint = _write_run_info(run_dir, cfg)

    def progress(metrics: Dict[str, float]) -> None:
        if "eval_return" in metrics:
            log.info(
                "steps=%d return=%.3f eval=%.3f recon=%.4f",
                metrics["env_steps"], metrics["mean_return"],
                metrics["eval_return"], metrics["recon_loss"],
            )

    return train(
        cfg.arena, cfg.model, cfg.train,
        out_dir=run_dir, warm_start=warm_start,
        stop_return=stop_return, cfg_fingerprint=fingerprint, log_fn=progress,
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    run_dir = _run_dir(args.out_dir, cfg.train.seed)
    log.info("run directory: %s", run_dir)
    result = _train_once(cfg, run_dir, stop_return=args.stop_return)
    log.info("finished at %d env steps", result["env_steps"])
    return 0


EVAL_FIELDS = [
    "label", "n_agents", "n_targets", "grid_size", "sight_radius",
    "mean_return", "std_return", "ci95", "episodes",
]


def _eval_rows(
    checkpoint: Path,
    targets: List[Tuple[str, ArenaConfig]],
    episodes: int,
    seed: int,
    model: Optional[ModelConfig] = None,
) -> List[Dict[str, object]]:
    params, model_cfg, _, _ = restore_model(checkpoint, model)
    rows = []
    for label, target in targets:
        stats = evaluate(params, model_cfg, target, episodes, seed=seed)
        rows.append({
            "label": label,
            "n_agents": target.n_agents,
            "n_targets": target.n_targets,
            "grid_size": target.grid_size,
            "sight_radius": target.sight_radius,
            "mean_return": stats["mean_return"],
            "std_return": stats["std_return"],
            "ci95": stats["ci95"],
            "episodes": stats["episodes"],
        })
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.override)
    targets: List[Tuple[str, ArenaConfig]] = [("source", cfg.arena)]
    targets += [
        (f"target{i}", t) for i, t in enumerate(cfg.eval_targets)
    ]
    out_path = Path(args.out_dir) / "eval.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.episodes > 0:
        rows = _eval_rows(
            Path(args.checkpoint), targets, args.episodes, args.seed or 0, cfg.model
        )
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %s (%d rows)", out_path, len(rows))
    return 0


def write_svg_lines(
    path: Path,
    series: Dict[str, List[Tuple[float, float]]],
    width: int = 640,
    height: int = 400,
    title: str = "",
) -> None:
    """Minimal SVG line chart; plotting never affects experiment correctness."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        path.write_text("<svg xmlns='http://www.w3.org/2000/svg'/>")
        return
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs) or 1.0
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 45
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}'>",
        f"<text x='{width/2}' y='18' text-anchor='middle' font-size='14'>{title}</text>",
        f"<line x1='{pad}' y1='{height-pad}' x2='{width-pad}' y2='{height-pad}' stroke='black'/>",
        f"<line x1='{pad}' y1='{pad}' x2='{pad}' y2='{height-pad}' stroke='black'/>",
        f"<text x='{pad}' y='{height-pad+16}' font-size='10'>{x0:g}</text>",
        f"<text x='{width-pad}' y='{height-pad+16}' text-anchor='end' font-size='10'>{x1:g}</text>",
        f"<text x='{pad-4}' y='{height-pad}' text-anchor='end' font-size='10'>{y0:g}</text>",
        f"<text x='{pad-4}' y='{pad}' text-anchor='end' font-size='10'>{y1:g}</text>",
    ]
    for i, (label, points) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in points)
        parts.append(f"<polyline points='{coords}' fill='none' stroke='{color}' stroke-width='1.5'/>")
        parts.append(
            f"<text x='{width-pad}' y='{pad + 14 * i}' text-anchor='end' font-size='11' "
            f"fill='{color}'>{label}</text>"
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts))


ABLATE_FIELDS = ["variant", "seed", "env_steps", "final_eval_return", "final_train_return"]


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.override)
    base_seed = args.seed if args.seed is not None else cfg.train.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    curves: Dict[str, List[Tuple[float, float]]] = {}
    for variant in ABLATIONS:
        per_variant: Dict[int, List[Tuple[float, float]]] = {}
        for s in range(args.seeds):
            seed = base_seed + s
            vcfg = dataclasses.replace(
                cfg,
                model=dataclasses.replace(cfg.model, ablation=variant),
                train=dataclasses.replace(cfg.train, seed=seed),
            )
            run_dir = out_dir / f"{variant}-seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            log.info("ablation %s seed %d", variant, seed)
            result = _train_once(vcfg, run_dir)
            evals = [
                (h["env_steps"], h["eval_return"])
                for h in result["history"] if "eval_return" in h
            ]
            per_variant[seed] = evals
            final_eval = evals[-1][1] if evals else float("nan")
            rows.append({
                "variant": variant,
                "seed": seed,
                "env_steps": result["env_steps"],
                "final_eval_return": final_eval,
                "final_train_return": result["history"][-1]["mean_return"],
            })
        # mean curve across seeds at shared round indices
        if per_variant:
            lengths = min(len(v) for v in per_variant.values())
            curve = []
            for k in range(lengths):
                xs = [v[k][0] for v in per_variant.values()]
                ys = [v[k][1] for v in per_variant.values()]
                curve.append((sum(xs) / len(xs), sum(ys) / len(ys)))
            curves[variant] = curve
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    write_svg_lines(out_dir / "ablation.svg", curves, title="evaluation return vs env steps")
    log.info("wrote %s", csv_path)
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    run_dir = _run_dir(args.out_dir, cfg.train.seed)
    log.info("warm-starting from %s into %s", args.checkpoint, run_dir)
    result = _train_once(cfg, run_dir, warm_start=Path(args.checkpoint), stop_return=args.stop_return)
    log.info("finished at %d env steps", result["env_steps"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entitymarl")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False):
        if config:
            p.add_argument("--config", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p_train = sub.add_parser("train", help="train on the configured arena")
    common(p_train)
    p_train.add_argument("--stop-return", type=float, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on source and target arenas")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--episodes", type=int, default=64)
    p_eval.set_defaults(fn=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train all ablation variants with shared seeds")
    common(p_abl)
    p_abl.add_argument("--seeds", type=int, default=1)
    p_abl.set_defaults(fn=cmd_ablate)

    p_tr = sub.add_parser("transfer", help="train warm-started from a checkpoint")
    common(p_tr, checkpoint=True)
    p_tr.add_argument("--stop-return", type=float, default=None)
    p_tr.set_defaults(fn=cmd_transfer)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
