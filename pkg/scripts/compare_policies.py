"""Paired proposed-vs-random comparison under common random numbers."""
import argparse
import json
from pathlib import Path

from feelsched.harness import compare_policies, load_spec

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--spec", default=ROOT / "experiments" / "energy_comparison.toml")
    ap.add_argument("--replications", type=int)
    ap.add_argument("--out", default="results/comparison")
    args = ap.parse_args()
    spec = load_spec(args.spec).with_overrides(replications=args.replications)
    report = compare_policies(spec, out=args.out)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"energy reduction per scheduled device: {100 * report['energy_reduction']:.2f}%")


if __name__ == "__main__":
    main()
