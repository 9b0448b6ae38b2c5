#!/usr/bin/env python3
"""Run the reduced-scale domain-gap benchmark across seeds and print a table.

Trains BASELINE, MIXUP_NO_WD, and UDA1 on a synthetic source/target split
with a strong appearance gap, then reports test-domain cartilage Dice and
source-validation Dice per setting, plus the directional checks.
"""

import argparse
from pathlib import Path

from cartseg.experiments import TrialScale, directional_claims_hold, run_domain_gap_trial


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True, help="work directory for data and runs")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=TrialScale.epochs)
    parser.add_argument("--source-n", type=int, default=TrialScale.source_count)
    parser.add_argument("--target-n", type=int, default=TrialScale.target_count)
    parser.add_argument("--test-n", type=int, default=TrialScale.test_count)
    parser.add_argument("--margin", type=float, default=0.02, help="Dice margin for the directional checks")
    args = parser.parse_args()

    scale = TrialScale(
        source_count=args.source_n,
        target_count=args.target_n,
        test_count=args.test_n,
        epochs=args.epochs,
    )
    all_hold = 0
    for seed in args.seeds:
        results = run_domain_gap_trial(seed, args.out / f"seed{seed}", scale)
        checks = directional_claims_hold(results, margin=args.margin)
        print(f"seed {seed}")
        for setting, r in results.items():
            print(f"  {setting.value:<12} test_dsc={r.test_dsc:.3f}  source_val_dsc={r.source_val_dsc:.3f}")
        for name, ok in checks.items():
            print(f"  {name}: {'PASS' if ok else 'FAIL'}")
        all_hold += all(checks.values())
    print(f"{all_hold}/{len(args.seeds)} seeds satisfied every directional check")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
