#!/usr/bin/env python3
"""Train the full model on the default arena over several seeds, stopping
each run once sampled evaluation reaches the milestone return.

Results are cached under tests/_artifacts/milestone/seed<N>/ and reused by
the acceptance test suite. Delete a seed directory to retrain it.
"""

import argparse
import json
from pathlib import Path

from entitymarl.studies import MILESTONE_RETURN, run_milestone

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument(
        "--out-dir", type=Path, default=ROOT / "tests" / "_artifacts" / "milestone"
    )
    args = ap.parse_args()
    results = []
    for seed in args.seeds:
        res = run_milestone(seed, args.out_dir / f"seed{seed}")
        print(json.dumps({k: v for k, v in res.items() if k != "recon_curve"}), flush=True)
        results.append(res)
    reached = sum(r["reached"] for r in results)
    print(f"reached {MILESTONE_RETURN}: {reached}/{len(results)} seeds")


if __name__ == "__main__":
    main()
