"""Command-line entry point: ``feelsched {run,compare,verify-convergence,selftest}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace

import numpy as np

from .convergence import BenchmarkConfig, verify_convergence
from .harness import POLICIES, ExperimentSpec, InvariantViolation, compare_policies, load_spec, run_experiment
from .numerics import RngStream, SolverDidNotConverge, bisect, lambert_w_m1

log = logging.getLogger("feelsched")


def _overrides(args) -> dict:
    return {
        "time_reserve": args.gamma,
        "freq_opt_scaling": args.epsilon,
        "tradeoff": args.V,
        "schedule_size": args.zeta,
    }


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.spec) if getattr(args, "spec", None) else ExperimentSpec()
    return spec.with_overrides(system=_overrides(args), seed=args.seed, replications=args.replications,
                               out=args.out, policy=getattr(args, "policy", None))


def cmd_run(args) -> int:
    spec = _spec(args)
    res = run_experiment(spec)
    print(json.dumps(res.summary, indent=2, sort_keys=True, default=float))
    for name, path in res.paths.items():
        log.info("wrote %s: %s", name, path)
    return 0


def cmd_compare(args) -> int:
    spec = _spec(args)
    report = compare_policies(spec, tuple(args.policies), out=spec.out)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


def cmd_verify(args) -> int:
    kw = {k: v for k, v in {"seed": args.seed, "replications": args.replications, "rounds": args.rounds,
                            "policy": args.policy}.items() if v is not None}
    if args.zeta is not None:
        kw["schedule_size"] = args.zeta
    cfg = replace(BenchmarkConfig(), **kw)
    rep = verify_convergence(cfg, out=args.out)
    print(json.dumps(rep.summary(), indent=2, sort_keys=True, default=float))
    return 0 if rep.passed else 1


def _selftest() -> dict[str, bool]:
    """Fast oracle checks of the numerical core."""
    from .scheduler import bandwidth_problem, interior_start, rho_min, transmit_power
    from .system import DeviceProfile, SystemConfig, tx_rate
    from .numerics import solve_barrier

    rng = RngStream(12345, 0)
    out = {}
    psi = -np.exp(-rng.uniform(1.0001, 50.0, size=500))
    w = np.array([lambert_w_m1(p) for p in psi])
    out["lambert_residual"] = bool(np.all(np.abs(w * np.exp(w) - psi) <= 1e-12 * np.abs(psi)) and np.all(w <= -1))
    cfg = SystemConfig(model_dim=100_000)
    worst = 0.0
    for _ in range(200):
        prof = DeviceProfile(0, 10 ** rng.uniform(-2, 0), 10 ** rng.uniform(-2, 2))
        f = rng.uniform(0.05e9, 1.5e9)
        g = prof.pathloss * rng.exponential()
        r = rho_min(f, g, prof, cfg)
        if r is None:
            continue
        left = cfg.round_limit - cfg.cpu_cycles / f
        oracle = bisect(lambda x: cfg.model_bits / tx_rate(x, prof.max_power, g, cfg) - left, 1e-15, 1.0)
        worst = max(worst, abs(r - oracle) / oracle)
    out["rho_min_vs_bisection"] = worst <= 1e-9
    ok = True
    for _ in range(20):
        profiles = [DeviceProfile(k, 10 ** rng.uniform(-2, 0), 10 ** rng.uniform(-2, 2)) for k in range(2)]
        f = {k: rng.uniform(0.2e9, 1.5e9) for k in range(2)}
        gains = [p.pathloss * rng.exponential() for p in profiles]
        lows = [rho_min(f[k], gains[k], profiles[k], cfg) for k in range(2)]
        if None in lows or sum(lows) >= 1:
            continue
        q = rng.uniform(0, 10, size=2)
        obj, cons = bandwidth_problem([0, 1], f, gains, q, cfg, profiles)
        x = solve_barrier(obj, cons, interior_start(np.array(lows)))
        grid = np.arange(lows[0], 1.0 - lows[1], 1e-3)
        best = min(obj(np.array([a, 1.0 - a]))[0] for a in grid) if grid.size else math.inf
        ok &= obj(x)[0] <= best + 1e-6 and all(c(x)[0] <= 1e-10 for c in cons)
        for k in range(2):
            p = transmit_power(x[k], f[k], gains[k], cfg)
            ok &= p <= profiles[k].max_power + 1e-12
    out["barrier_vs_grid"] = bool(ok)
    return out


def cmd_selftest(args) -> int:
    res = _selftest()
    for name, ok in res.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if all(res.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feelsched", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, spec_arg=True):
        if spec_arg:
            sp.add_argument("spec", nargs="?", help="experiment spec (TOML)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--replications", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--gamma", type=float, help="time reserve factor")
        sp.add_argument("--epsilon", type=float, help="frequency-optimised set scaling")
        sp.add_argument("--V", type=float, help="drift-plus-penalty tradeoff")
        sp.add_argument("--zeta", type=int, help="devices scheduled per round")

    sp = sub.add_parser("run", help="run one experiment spec")
    common(sp)
    sp.add_argument("--policy", choices=POLICIES)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="paired comparison of two policies")
    common(sp)
    sp.add_argument("--policies", nargs=2, default=list(POLICIES), choices=POLICIES)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify-convergence", help="drifting-quadratic bound benchmark")
    common(sp, spec_arg=False)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--policy", choices=("proposed", "full", "baseline-random"))
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("selftest", help="fast oracle checks")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t = time.perf_counter()
    try:
        code = args.func(args)
    except (InvariantViolation, AssertionError, SolverDidNotConverge, ValueError, OSError) as exc:
        print(f"feelsched: error: {exc}", file=sys.stderr)
        return 2
    log.info("done in %.1f s", time.perf_counter() - t)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
