"""Run the drifting-quadratic benchmark and write bound_trace.csv."""
import argparse
import json
from dataclasses import replace

from feelsched.convergence import BenchmarkConfig, verify_convergence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--replications", type=int, default=200)
    ap.add_argument("--rounds", type=int, default=300)
    ap.add_argument("--policy", default="proposed", choices=("proposed", "full", "baseline-random"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/convergence")
    args = ap.parse_args()
    cfg = replace(BenchmarkConfig(), replications=args.replications, rounds=args.rounds, policy=args.policy,
                  seed=args.seed)
    rep = verify_convergence(cfg, out=args.out)
    print(json.dumps(rep.summary(), indent=2, sort_keys=True))
    raise SystemExit(0 if rep.passed else 1)


if __name__ == "__main__":
    main()
