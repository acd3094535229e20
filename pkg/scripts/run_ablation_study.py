#!/usr/bin/env python3
"""Train full / no_masked_inference / no_decoder_reuse variants over shared
seeds at a matched step budget, then compare final and zero-shot returns.

Results are cached under tests/_artifacts/ablation/<variant>/seed<N>/ and
reused by the acceptance test suite.
"""

import argparse
import json
from pathlib import Path

from entitymarl.policy import ABLATIONS
from entitymarl.studies import ABLATION_ENV_STEPS, run_ablation

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--env-steps", type=int, default=ABLATION_ENV_STEPS)
    ap.add_argument(
        "--out-dir", type=Path, default=ROOT / "tests" / "_artifacts" / "ablation"
    )
    args = ap.parse_args()
    by_variant = {v: [] for v in ABLATIONS}
    for seed in args.seeds:
        for variant in ABLATIONS:
            res = run_ablation(
                variant, seed, args.out_dir / variant / f"seed{seed}", args.env_steps
            )
            print(json.dumps(res), flush=True)
            by_variant[variant].append(res)
    for variant, rows in by_variant.items():
        finals = [r["final_eval_return"] for r in rows]
        shifted = [r["zero_shot_return"] for r in rows]
        print(
            f"{variant}: final={sum(finals)/len(finals):.3f} "
            f"zero_shot={sum(shifted)/len(shifted):.3f}"
        )


if __name__ == "__main__":
    main()
