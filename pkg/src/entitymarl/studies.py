"""Long-running experiment recipes with on-disk result caching.

Each study writes a self-contained directory (checkpoint, metrics history,
result.json) and is skipped when its result.json already exists, so the
acceptance tests and the runnable scripts share one set of artifacts.
Delete a study directory to force a rerun.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Dict, Optional

from .arena import ArenaConfig
from .policy import ModelConfig
from .training import TrainConfig, evaluate, restore_model, train

MILESTONE_RETURN = 2.5
MILESTONE_ENV_STEPS = 2_000_000
MILESTONE_TIME_BUDGET_S = 4 * 3600.0
ABLATION_ENV_STEPS = 150_000


def _load_result(out_dir: Path) -> Optional[Dict]:
    path = out_dir / "result.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    return None


def run_milestone(
    seed: int,
    out_dir: Path,
    stop_return: float = MILESTONE_RETURN,
    total_env_steps: int = MILESTONE_ENV_STEPS,
) -> Dict:
    """Train one seed on the default arena, stopping at the target return.

    Returns {reached, env_steps, wall_time_s, final_eval_return, history...}.
    """
    out_dir = Path(out_dir)
    cached = _load_result(out_dir)
    if cached is not None:
        return cached
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(seed=seed, total_env_steps=total_env_steps)
    t0 = time.time()
    res = train(
        ArenaConfig(), ModelConfig(), tcfg, out_dir=out_dir, stop_return=stop_return,
        time_budget_s=MILESTONE_TIME_BUDGET_S,
    )
    wall = time.time() - t0
    final_eval = res["final_eval"]["mean_return"] if res["final_eval"] else float("nan")
    recon_curve = [
        (m["env_steps"], m["recon_loss"]) for m in res["history"] if "recon_loss" in m
    ]
    result = {
        "seed": seed,
        "reached": bool(final_eval >= stop_return),
        "stop_return": stop_return,
        "env_steps": res["env_steps"],
        "wall_time_s": wall,
        "final_eval_return": final_eval,
        "recon_curve": recon_curve,
        "checkpoint": str(out_dir / "checkpoint.npz"),
    }
    with open(out_dir / "result.json", "w") as fh:
        json.dump(result, fh, indent=2)
    return result


def run_ablation(
    variant: str,
    seed: int,
    out_dir: Path,
    total_env_steps: int = ABLATION_ENV_STEPS,
) -> Dict:
    """Train one ablation variant for a fixed step budget (no early stop)."""
    out_dir = Path(out_dir)
    cached = _load_result(out_dir)
    if cached is not None:
        return cached
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(seed=seed, total_env_steps=total_env_steps)
    mcfg = ModelConfig(ablation=variant)
    t0 = time.time()
    res = train(ArenaConfig(), mcfg, tcfg, out_dir=out_dir)
    wall = time.time() - t0
    params = res["params"]
    final = evaluate(params, mcfg, ArenaConfig(), episodes=64, seed=seed + 500_000)
    shifted = evaluate(
        params,
        # zero-shot target arena: one extra target, same parameters
        mcfg,
        ArenaConfig(n_targets=4),
        episodes=64,
        seed=seed + 600_000,
    )
    result = {
        "variant": variant,
        "seed": seed,
        "env_steps": res["env_steps"],
        "wall_time_s": wall,
        "final_eval_return": final["mean_return"],
        "zero_shot_return": shifted["mean_return"],
        "checkpoint": str(out_dir / "checkpoint.npz"),
    }
    with open(out_dir / "result.json", "w") as fh:
        json.dump(result, fh, indent=2)
    return result


def eval_checkpoint(
    checkpoint: Path, arena: ArenaConfig, episodes: int = 64, seed: int = 0
) -> Dict:
    params, model_cfg, _, _ = restore_model(Path(checkpoint))
    return evaluate(params, model_cfg, arena, episodes, seed=seed)
