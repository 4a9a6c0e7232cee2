"""Acceptance criteria 1-10, one test each, printed as PASS/FAIL lines."""
import itertools
import math
import time
from pathlib import Path

import numpy as np

from feelsched.convergence import BenchmarkConfig, DriftingQuadratic, lemma3_partial_sums, verify_convergence
from feelsched.harness import Simulation, compare_policies, load_spec, run_experiment
from feelsched.numerics import RngStream, bisect
from feelsched.scheduler import bandwidth_problem, prune_and_allocate, required_rate, rho_min
from feelsched.system import DeviceProfile, SystemConfig, tx_rate

from conftest import random_instance

ROOT = Path(__file__).resolve().parents[1]
EXPERIMENTS = ROOT / "experiments"


def _elapsed(t0):
    return time.perf_counter() - t0


def _weak_instance(rng, n):
    """Weak channels and spread-out queue weights, so latency constraints and
    the power limit are often active at the optimum."""
    profiles = [DeviceProfile(k, 10 ** rng.uniform(-2, 0), 10 ** rng.uniform(-10, -7)) for k in range(n)]
    f = {k: rng.uniform(0.2e9, 1.5e9) for k in range(n)}
    gains = np.array([p.pathloss * rng.exponential() for p in profiles])
    return profiles, f, gains, 10 ** rng.uniform(-4, 1, size=n)


def test_criterion_01_rho_min_closed_form(verdict):
    cfg = SystemConfig(model_dim=100_000)
    rng = RngStream(101, 0)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 10_000:
        profiles, f, gains = random_instance(rng, cfg, 1)
        r = rho_min(f[0], gains[0], profiles[0], cfg)
        if r is None:
            continue
        need = required_rate(f[0], cfg)
        oracle = bisect(lambda x: tx_rate(x, profiles[0].max_power, gains[0], cfg) - need, 1e-12, 1.0)
        worst = max(worst, abs(r - oracle) / oracle)
        n += 1
    dt = _elapsed(t0)
    verdict(1, "rho_min vs bisection", worst <= 1e-9 and dt < 5.0,
            f"{n} instances, worst rel err {worst:.2e}, {dt:.1f} s")


def _grid_minimum(objective, constraints, n, step=1e-3):
    """Brute-force minimum over the simplex grid restricted to feasible points."""
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    if n == 2:
        pts = np.column_stack([ticks, 1.0 - ticks])
    else:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        keep = a + b <= 1.0 + 1e-12
        pts = np.column_stack([a[keep], b[keep], np.clip(1.0 - a[keep] - b[keep], 0.0, None)])
    pts = pts[np.all(pts > 0, axis=1)]
    best = math.inf
    for x in pts:
        if all(c(x)[0] <= 0.0 for c in constraints):
            best = min(best, objective(x)[0])
    return best


def _vector_grid_minimum(devices, f, gains, q, cfg, profiles, step=1e-3):
    ticks = np.arange(step, 1.0, step)
    if len(devices) == 2:
        pts = np.column_stack([ticks, 1.0 - ticks])
    else:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        c = 1.0 - a - b
        keep = c > step / 2
        pts = np.column_stack([a[keep], b[keep], c[keep]])
    total = np.zeros(len(pts))
    feasible = np.ones(len(pts), dtype=bool)
    for i, k in enumerate(devices):
        rho = pts[:, i]
        snr = profiles[k].max_power * gains[k] / (cfg.bandwidth * cfg.noise_psd)
        rate = cfg.bandwidth * rho * np.log2(1.0 + snr / rho)
        feasible &= rate >= required_rate(f[k], cfg)
        total += q[k] * profiles[k].max_power * cfg.model_bits / rate
    return float(total[feasible].min()) if feasible.any() else math.inf


def test_criterion_02_barrier_vs_grid(verdict):
    cfg = SystemConfig(model_dim=100_000)
    rng = RngStream(102, 0)
    t0 = time.perf_counter()
    worst_gap, worst_sum, worst_con, done, sizes, active = -math.inf, 0.0, -math.inf, 0, [], 0
    while done < 200:
        n = 2 + done % 2
        profiles, f, gains, q = _weak_instance(rng, n)
        agg = prune_and_allocate(list(range(n)), f, gains, q, cfg, profiles)
        if len(agg.aggregated) != n:
            continue
        obj, cons = bandwidth_problem(list(range(n)), f, gains, q, cfg, profiles)
        x = np.array([agg.rho[k] for k in range(n)])
        best = _vector_grid_minimum(list(range(n)), f, gains, q, cfg, profiles)
        worst_gap = max(worst_gap, obj(x)[0] - best)
        worst_sum = max(worst_sum, abs(x.sum() - 1.0))
        con = max(c(x)[0] for c in cons)
        worst_con = max(worst_con, con)
        active += con > -1e-3
        sizes.append(n)
        done += 1
    dt = _elapsed(t0)
    ok = worst_gap <= 1e-6 and worst_sum <= 1e-10 and worst_con <= 0.0 and dt < 60.0
    verdict(2, "bandwidth solver vs simplex grid", ok,
            f"{done} instances (n=2: {sizes.count(2)}, n=3: {sizes.count(3)}), worst gap {worst_gap:.2e}, "
            f"max |sum-1| {worst_sum:.1e}, max constraint {worst_con:.1e}, {active} with an active latency bound, "
            f"{dt:.1f} s")


def test_criterion_02_grid_helpers_agree():
    # the vectorised grid used above against a scalar evaluation of the solver's own closures
    cfg = SystemConfig(model_dim=100_000)
    rng = RngStream(112, 0)
    checked = 0
    while checked < 3:
        profiles, f, gains = random_instance(rng, cfg, 2)
        q = rng.uniform(0.1, 10.0, size=2)
        lows = [rho_min(f[k], gains[k], profiles[k], cfg) for k in range(2)]
        if None in lows or sum(lows) >= 1:
            continue
        obj, cons = bandwidth_problem([0, 1], f, gains, q, cfg, profiles)
        a = _grid_minimum(obj, cons, 2)
        b = _vector_grid_minimum([0, 1], f, gains, q, cfg, profiles)
        assert a == b or abs(a - b) <= 1e-9 * abs(a)
        checked += 1


def test_criterion_03_power_self_consistency(verdict):
    cfg = SystemConfig(model_dim=100_000)
    rng = RngStream(103, 0)
    lo_dev, hi_dev, p_excess, devices, at_limit = math.inf, -math.inf, -math.inf, 0, 0
    for i in range(10_000):
        n = 1 + i % 3
        if i % 2:
            profiles, f, gains, q = _weak_instance(rng, n)
        else:
            profiles, f, gains = random_instance(rng, cfg, n)
            q = rng.uniform(0.1, 10.0, size=n)
        agg = prune_and_allocate(list(range(n)), f, gains, q, cfg, profiles)
        for k in agg.aggregated:
            p = agg.power[k]
            total = cfg.cpu_cycles / f[k] + cfg.model_bits / tx_rate(agg.rho[k], p, gains[k], cfg)
            lo_dev = min(lo_dev, total - cfg.round_limit)
            hi_dev = max(hi_dev, total - cfg.round_limit)
            p_excess = max(p_excess, p - profiles[k].max_power)
            at_limit += p >= (1 - 1e-6) * profiles[k].max_power
            devices += 1
    ok = lo_dev >= -1e-6 and hi_dev <= 0.0 and p_excess <= 1e-12
    verdict(3, "transmit power self-consistency", ok,
            f"10000 instances, {devices} devices, latency - T_rd in [{lo_dev:.1e}, {hi_dev:.1e}], "
            f"max P - P_max {p_excess:.2e}, {at_limit} at the power limit")


def test_criterion_04_queue_stability(verdict):
    spec = load_spec(EXPERIMENTS / "queue_stability.toml")
    assert (spec.system.num_devices, spec.system.schedule_size, spec.system.total_rounds, spec.replications) == (
        40, 3, 500, 10)
    t0 = time.perf_counter()
    res = run_experiment(spec, keep_decisions=False)
    dt = _elapsed(t0)
    e_avg, T = spec.system.energy_budget, spec.system.total_rounds
    avg = max(p["max_time_avg_device_energy"] for p in res.per_replication)
    growth = max(p["final_max_queue"] for p in res.per_replication) / T
    ok = avg <= 1.1 * e_avg and growth < 0.05 * e_avg and dt < 120.0
    verdict(4, "long-term energy and queue growth", ok,
            f"max time-avg energy {avg:.3g} J vs {1.1 * e_avg:.3g}, max Q(T)/T {growth:.3g}, {dt:.0f} s")


def test_criterion_04_binding_budget(verdict):
    # Supplementary: at the defaults above the budget never binds. Here it does,
    # and the queue recursion gives the exact finite-horizon bound
    # (1/T) sum_t s_k E_k <= E_avg + Q_k(T) / T for every device.
    spec = load_spec(EXPERIMENTS / "tight_budget.toml")
    t0 = time.perf_counter()
    res = run_experiment(spec, keep_decisions=False)
    dt = _elapsed(t0)
    e_avg, T = spec.system.energy_budget, spec.system.total_rounds
    slack, worst_avg, worst_q = math.inf, 0.0, 0.0
    for rep in range(spec.replications):
        recs = [r for r in res.records if r.replication == rep]
        avg = np.mean([r.device_energy for r in recs], axis=0)
        q = recs[-1].device_queue
        slack = min(slack, float(np.min(e_avg + q / T - avg)))
        worst_avg, worst_q = max(worst_avg, float(avg.max())), max(worst_q, float(q.max()))
    within = worst_avg <= 1.1 * e_avg
    verdict(4, "binding budget, exact queue bound (supplementary)", slack >= -1e-12,
            f"E_avg {e_avg:g} J, max time-avg {worst_avg / e_avg:.3f} x E_avg "
            f"({'within' if within else 'above'} 1.1 x at T={T}), max Q(T)/T {worst_q / T:.2g}, "
            f"bound slack {slack:.1e}, {dt:.0f} s")


def test_criterion_05_energy_reduction(verdict):
    spec = load_spec(EXPERIMENTS / "energy_comparison.toml")
    cfg = spec.system
    assert cfg.schedule_size / cfg.num_devices == 0.075 and spec.task == "logistic"
    assert (cfg.total_rounds, spec.replications) == (200, 10)
    t0 = time.perf_counter()
    rep = compare_policies(spec)
    dt = _elapsed(t0)
    e = rep["energy_per_scheduled_device"]
    ok = rep["energy_reduction"] >= 0.5 and dt < 300.0
    verdict(5, "proposed vs random energy", ok,
            f"reduction {100 * rep['energy_reduction']:.2f}% ({e['proposed']:.3g} vs {e['baseline-random']:.3g} J), "
            f"accuracy delta {rep['final_accuracy_delta']:+.3f}, {dt:.0f} s")


def test_criterion_06_bound_dominance(verdict, tmp_path):
    cfg = BenchmarkConfig()
    assert (cfg.dim, len(cfg.sizes), cfg.replications, cfg.rounds) == (10, 5, 200, 300)
    t0 = time.perf_counter()
    rep = verify_convergence(cfg, out=tmp_path)
    dt = _elapsed(t0)
    tr = rep.trace
    slack = float(np.min(tr.bound + 3 * tr.stderr - tr.empirical))
    ok = rep.checks["bound_dominance"] and rep.checks["tail_below_asymptote"] and rep.checks["contraction"] \
        and dt < 180.0
    verdict(6, "convergence bound dominance", ok,
            f"t0={rep.t0}, min slack {slack:.3g}, tail {rep.tail_mean:.3g} vs asymptote {rep.asymptote:.3g}, "
            f"empty rounds {rep.empty_rounds}, {dt:.0f} s")


def test_criterion_07_inequalities(verdict):
    t0 = time.perf_counter()
    cfg = BenchmarkConfig(rounds=300)
    bench = DriftingQuadratic(cfg)
    p = bench.params()
    rng = RngStream(107, 0)
    K, alpha = cfg.num_devices, 1.0 / p.L
    descent, variance = math.inf, math.inf
    subsets = [s for r in range(1, K + 1) for s in itertools.combinations(range(K), r)]
    for i in range(1000):
        t = int(rng.integers(0, cfg.rounds + 1))
        sub = list(subsets[i % len(subsets)])
        star = bench.global_optimum(t)
        theta = star + rng.normal(0.0, 10 ** rng.uniform(-2, 1), size=cfg.dim)
        d2 = float(np.sum((theta - star) ** 2))
        g = bench.mean_gradient(theta, sub, t)
        lhs = float(np.sum((theta - star - alpha * g) ** 2))
        descent = min(descent, (1 - p.mu * alpha) * d2 + alpha * p.omega - lhs)
        var = bench.gradient_variance(theta, sub, t)
        variance = min(variance, p.C2 + 2 * (p.C1 - 1) * p.L ** 2 * (d2 + p.omega / p.mu) - var)
    tails = {k: float(lemma3_partial_sums(k, int(round(1e4 / (1 - k))))[-1]) for k in (0.5, 0.9, 0.99)}
    dt = _elapsed(t0)
    ok = descent >= -1e-9 and variance >= -1e-9 and all(v < 0.01 for v in tails.values()) and dt < 60.0
    verdict(7, "descent, variance and partial-sum inequalities", ok,
            f"descent slack {descent:.2e}, variance slack {variance:.2e}, "
            + ", ".join(f"s(kappa={k})={v:.1e}" for k, v in tails.items()) + f", {dt:.1f} s")


def test_criterion_08_importance_bounds(verdict):
    base = load_spec(EXPERIMENTS / "default.toml").with_overrides(replications=1)
    dissim_range, mean_err, label_excess, rounds = [math.inf, -math.inf], 0.0, 0, 0
    for arrival, split in (("truncated-gaussian", "non-iid"), ("uniform", "iid"), ("truncated-poisson", "non-iid")):
        spec = base.with_overrides(arrival=arrival, split=split)
        sim = Simulation(spec)
        for d in sim.datasets:
            if split == "non-iid":
                label_excess = max(label_excess, np.count_nonzero(d.label_counts(d.allotment)) - spec.max_labels)
        for _ in range(spec.system.total_rounds):
            sim.run_round()
            s = sim.decisions[-1].scheduling
            if not s.feasible:
                continue
            rounds += 1
            dis = list(s.dissimilarity_term.values())
            dissim_range = [min(dissim_range[0], *dis), max(dissim_range[1], *dis)]
            if sum(sim.datasets[k].last_arrivals for k in s.feasible) > 0:
                mean_err = max(mean_err, abs(np.mean([s.arrival_term[k] for k in s.feasible]) - 1.0))
    ok = dissim_range[0] >= 0.0 and dissim_range[1] <= 2.0 and mean_err <= 1e-12 and label_excess <= 0
    verdict(8, "importance metric bounds", ok,
            f"{rounds} rounds, dissimilarity in [{dissim_range[0]:.3f}, {dissim_range[1]:.3f}], "
            f"max |mean arrival term - 1| {mean_err:.1e}, label cap excess {label_excess}")


def test_criterion_09_determinism(verdict, tmp_path):
    spec = load_spec(EXPERIMENTS / "golden.toml")
    a = Path(run_experiment(spec, out=tmp_path / "a").paths["metrics"]).read_bytes()
    b = Path(run_experiment(spec, out=tmp_path / "b").paths["metrics"]).read_bytes()
    frozen = (ROOT / "tests" / "data" / "golden_metrics.csv").read_bytes()
    verdict(9, "golden run determinism", a == b == frozen,
            f"{len(a)} bytes, runs identical: {a == b}, matches frozen file: {a == frozen}")


def test_criterion_10_time_reserve_tradeoff(verdict):
    spec = load_spec(EXPERIMENTS / "gamma_sweep.toml")
    cfg = spec.system
    assert (cfg.round_limit, cfg.bandwidth, cfg.schedule_size / cfg.num_devices) == (1.4, 3e6, 0.05)
    t0 = time.perf_counter()
    rates = {}
    for g in (1.0, 0.65, 0.31, 0.1):
        m = run_experiment(spec.with_overrides(system={"time_reserve": g}), keep_decisions=False).summary["metrics"]
        rates[g] = (m["dropping_rate"]["mean"], m["freq_opt_rate"]["mean"])
    dt = _elapsed(t0)
    ok = rates[0.31][0] < rates[1.0][0] and rates[0.1][1] < rates[0.65][1]
    verdict(10, "time-reserve tradeoff ordering", ok,
            ", ".join(f"gamma={g}: drop {d:.3f} freq-opt {fo:.3f}" for g, (d, fo) in rates.items())
            + f", {dt:.0f} s")
