"""Two-stage per-round resource management and the random baseline.

Scheduling phase (before local training, mean channel gains only): the
frequency-optimised candidate set, CPU frequencies and the ``xi`` ranking.
Aggregation phase (after training, instantaneous gains known): minimum
bandwidth fractions, pruning, the bandwidth problem and transmit powers.
Energy is charged per device and fed to the virtual queues.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import RngStream, SolverOptions, lambert_w_m1, solve_barrier
from .system import DeviceProfile, SystemConfig, cmp_energy, tx_rate

LN2 = math.log(2.0)

ImportanceFn = Callable[[list[int]], tuple[dict[int, float], dict[int, float]]]


@dataclass
class VirtualQueues:
    backlog: np.ndarray
    round: int = 0

    @classmethod
    def zeros(cls, num_devices: int) -> "VirtualQueues":
        return cls(np.zeros(num_devices))


@dataclass
class SchedulingDecision:
    round: int
    feasible: list[int]
    scheduled: list[int]
    frequencies: dict[int, float]
    used_fallback: bool
    scores: dict[int, float] = field(default_factory=dict)
    arrival_term: dict[int, float] = field(default_factory=dict)
    dissimilarity_term: dict[int, float] = field(default_factory=dict)

    @property
    def importance(self) -> dict[int, float]:
        return {k: self.arrival_term[k] + self.dissimilarity_term[k] for k in self.arrival_term}


@dataclass
class AggregationDecision:
    aggregated: list[int]
    rho_min: dict[int, float | None]
    rho: dict[int, float]
    power: dict[int, float]
    dropped: list[int]


@dataclass
class EnergyLedger:
    computation: np.ndarray
    transmission: np.ndarray

    @property
    def charged(self) -> np.ndarray:
        return self.computation + self.transmission


# ---------------------------------------------------------------------------
# scheduling phase


def surrogate_rate(profile: DeviceProfile, cfg: SystemConfig) -> float:
    """Rate estimate from the mean gain, equal bandwidth share and reserve factor."""
    z = cfg.schedule_size
    snr = profile.max_power * profile.pathloss * z / (cfg.bandwidth * cfg.noise_psd)
    return cfg.time_reserve * cfg.bandwidth / z * math.log2(1.0 + snr)


def optimal_frequency(profile: DeviceProfile, cfg: SystemConfig) -> float | None:
    """Slowest CPU frequency meeting the deadline under the surrogate rate.

    ``None`` when the surrogate upload alone already uses the whole round.
    """
    rate = surrogate_rate(profile, cfg)
    if rate <= 0:
        return None
    budget = cfg.round_limit - cfg.model_bits / rate
    if budget <= 0:
        return None
    return cfg.cpu_cycles / budget


def feasible_set(t: int, f_max: Sequence[float], cfg: SystemConfig,
                 profiles: Sequence[DeviceProfile]) -> tuple[list[int], dict[int, float], bool]:
    """Candidate devices, their CPU frequencies, and whether the fallback fired."""
    optimised = {}
    for p in profiles:
        f = optimal_frequency(p, cfg)
        if f is not None and 0 < f <= f_max[p.index]:
            optimised[p.index] = f
    if len(optimised) >= cfg.freq_opt_scaling * cfg.schedule_size:
        return sorted(optimised), optimised, False
    fallback = [p.index for p in profiles if cfg.cpu_cycles / f_max[p.index] <= cfg.round_limit]
    return fallback, {k: float(f_max[k]) for k in fallback}, True


def xi_score(queue: float, f_star: float, importance: float, profile: DeviceProfile, cfg: SystemConfig) -> float:
    z = cfg.schedule_size
    log_term = math.log2(1.0 + profile.max_power * profile.pathloss * z / (cfg.bandwidth * cfg.noise_psd))
    upload = profile.max_power * cfg.model_bits * z / (cfg.time_reserve * cfg.bandwidth * log_term)
    return queue * cfg.energy_coeff * cfg.cpu_cycles * f_star ** 2 + queue * upload - cfg.tradeoff * importance


def schedule(t: int, cfg: SystemConfig, profiles: Sequence[DeviceProfile], f_max: Sequence[float],
             queues: VirtualQueues, importance_fn: ImportanceFn) -> SchedulingDecision:
    """Pick the ``schedule_size`` feasible devices with the smallest ``xi``.

    Ties go to the lower device index.
    """
    feas, freqs, fallback = feasible_set(t, f_max, cfg, profiles)
    if not feas:
        return SchedulingDecision(t, [], [], {}, fallback)
    arrival, dissim = importance_fn(feas)
    scores = {k: xi_score(queues.backlog[k], freqs[k], arrival[k] + dissim[k], profiles[k], cfg) for k in feas}
    ranked = sorted(feas, key=lambda k: (scores[k], k))
    chosen = sorted(ranked[: cfg.schedule_size])
    return SchedulingDecision(t, feas, chosen, freqs, fallback, scores, arrival, dissim)


# ---------------------------------------------------------------------------
# aggregation phase


def required_rate(f_star: float, cfg: SystemConfig) -> float | None:
    """Upload rate needed to finish within the time left after computing."""
    slack = f_star * cfg.round_limit - cfg.cpu_cycles
    if slack <= 0:
        return None
    return cfg.model_bits * f_star / slack


def rho_min(f_star: float, gain_power: float, profile: DeviceProfile, cfg: SystemConfig) -> float | None:
    """Smallest bandwidth fraction meeting the deadline at full power.

    Closed form through the lower Lambert W branch. ``None`` if no
    fraction in ``(0, 1]`` works.
    """
    if gain_power <= 0:
        return None
    slack = f_star * cfg.round_limit - cfg.cpu_cycles
    if slack <= 0:
        return None
    snr_scale = profile.max_power * gain_power
    c_k = cfg.model_bits * f_star * cfg.noise_psd * LN2 / (snr_scale * slack)
    if not 0.0 < c_k < 1.0:
        # rho*ln(1 + 1/rho) < 1 for every rho: unlimited bandwidth is not enough
        return None
    try:
        w = lambert_w_m1(-c_k * math.exp(-c_k))
    except ValueError:
        return None
    denom = w + c_k
    if denom >= 0:
        return None
    rho = -c_k * snr_scale / (cfg.bandwidth * cfg.noise_psd * denom)
    if not 0.0 < rho <= 1.0:
        return None
    return rho


def _rate_and_derivs(rho: float, a: float, bandwidth: float) -> tuple[float, float, float]:
    # r(rho) = B rho log2(1 + a/rho) with a = P g / (B N0)
    if rho <= 0:
        return -math.inf, 0.0, 0.0
    lg = math.log1p(a / rho)
    r = bandwidth * rho * lg / LN2
    d1 = bandwidth * (lg - a / (rho + a)) / LN2
    d2 = -bandwidth * a * a / (rho * (rho + a) ** 2 * LN2)
    return r, d1, d2


def bandwidth_problem(devices: Sequence[int], f_star: dict[int, float], gains: Sequence[float],
                      backlog: Sequence[float], cfg: SystemConfig, profiles: Sequence[DeviceProfile]):
    """Objective and latency constraints of the bandwidth-split problem.

    Returns ``(objective, constraints)`` in the form accepted by
    :func:`feelsched.numerics.solve_barrier`; the latency constraint is
    normalised to ``1 - rate / required_rate <= 0``.
    """
    n = len(devices)
    a = [profiles[k].max_power * gains[k] / (cfg.bandwidth * cfg.noise_psd) for k in devices]
    weight = [backlog[k] * profiles[k].max_power * cfg.model_bits for k in devices]
    req = [required_rate(f_star[k], cfg) for k in devices]
    B = cfg.bandwidth

    def objective(x):
        val = 0.0
        g = np.zeros(n)
        h = np.zeros((n, n))
        for i in range(n):
            r, d1, d2 = _rate_and_derivs(x[i], a[i], B)
            if not r > 0:
                return math.inf, g, h
            val += weight[i] / r
            g[i] = -weight[i] * d1 / r ** 2
            h[i, i] = weight[i] * (2.0 * d1 * d1 / r ** 3 - d2 / r ** 2)
        return val, g, h

    def make_constraint(i):
        def con(x):
            g = np.zeros(n)
            h = np.zeros((n, n))
            r, d1, d2 = _rate_and_derivs(x[i], a[i], B)
            if r == -math.inf:
                return math.inf, g, h
            g[i] = -d1 / req[i]
            h[i, i] = -d2 / req[i]
            return 1.0 - r / req[i], g, h
        return con

    return objective, [make_constraint(i) for i in range(n)]


def interior_start(rmin: np.ndarray) -> np.ndarray | None:
    """Split the unused bandwidth proportionally to the minimum fractions.

    ``None`` means there is no interior (the minima already use it all).
    """
    slack = 1.0 - rmin.sum()
    if slack < 1e-12:
        return None
    if rmin.sum() > 0:
        return rmin + slack * rmin / rmin.sum()
    return rmin + slack / rmin.size


def transmit_power(rho: float, f_star: float, gain_power: float, cfg: SystemConfig) -> float:
    """Lowest power that uploads within ``round_limit - c/f`` on ``rho`` of the band.

    The closed form is nudged up by a few ulps if rounding would otherwise
    leave the realised upload a hair over the deadline.
    """
    budget = cfg.round_limit - cfg.cpu_cycles / f_star
    w = rho * cfg.bandwidth
    d = cfg.model_bits / (budget * w)
    p = w * cfg.noise_psd / gain_power * math.expm1(d * LN2)
    for _ in range(64):
        if cfg.cpu_cycles / f_star + cfg.model_bits / tx_rate(rho, p, gain_power, cfg) <= cfg.round_limit:
            break
        p = p * (1.0 + 4.0 * np.finfo(float).eps)
    return p


def prune_and_allocate(scheduled: Sequence[int], f_star: dict[int, float], gains: Sequence[float],
                       backlog: Sequence[float], cfg: SystemConfig, profiles: Sequence[DeviceProfile],
                       opts: SolverOptions = SolverOptions()) -> AggregationDecision:
    """Drop devices until the minimum bandwidth fractions fit, then split the band.

    Devices whose deadline is unreachable on their own go first; after that
    the device with the largest minimum fraction is removed (ties: higher
    index) until the minima sum to at most one.
    """
    rmin = {k: rho_min(f_star[k], gains[k], profiles[k], cfg) for k in scheduled}
    keep = [k for k in scheduled if rmin[k] is not None]
    while keep and sum(rmin[k] for k in keep) > 1.0:
        worst = max(keep, key=lambda k: (rmin[k], k))
        keep.remove(worst)
    keep.sort()
    dropped = sorted(set(scheduled) - set(keep))
    if not keep:
        return AggregationDecision([], rmin, {}, {}, dropped)
    lows = np.array([rmin[k] for k in keep])
    start = interior_start(lows)
    if len(keep) == 1:
        rho = np.ones(1)
    elif start is None:
        rho = lows / lows.sum()
    else:
        objective, constraints = bandwidth_problem(keep, f_star, gains, backlog, cfg, profiles)
        rho = solve_barrier(objective, constraints, start, opts)
    rho_map = {k: float(r) for k, r in zip(keep, rho)}
    power = {}
    for k in keep:
        p = transmit_power(rho_map[k], f_star[k], gains[k], cfg)
        if p > profiles[k].max_power + 1e-12:
            raise AssertionError(f"device {k}: power {p!r} exceeds P_max {profiles[k].max_power!r}")
        power[k] = p
    return AggregationDecision(keep, rmin, rho_map, power, dropped)


def energy_ledger(cfg: SystemConfig, sched: SchedulingDecision, agg: AggregationDecision,
                  gains: Sequence[float]) -> EnergyLedger:
    """Per-device energy of the round: compute for every scheduled device,
    upload only for the aggregated ones."""
    comp = np.zeros(cfg.num_devices)
    tran = np.zeros(cfg.num_devices)
    for k in sched.scheduled:
        comp[k] = cmp_energy(sched.frequencies[k], cfg)
    for k in agg.aggregated:
        rate = tx_rate(agg.rho[k], agg.power[k], gains[k], cfg)
        tran[k] = agg.power[k] * cfg.model_bits / rate
    return EnergyLedger(comp, tran)


def update_queues(queues: VirtualQueues, charged: np.ndarray, cfg: SystemConfig) -> VirtualQueues:
    backlog = np.maximum(queues.backlog + charged - cfg.energy_budget, 0.0)
    return VirtualQueues(backlog, queues.round + 1)


# ---------------------------------------------------------------------------
# random-scheduling baseline


def baseline_schedule(t: int, cfg: SystemConfig, f_max: Sequence[float], rng: RngStream) -> SchedulingDecision:
    able = [k for k in range(cfg.num_devices) if f_max[k] >= cfg.cpu_cycles / cfg.round_limit]
    if len(able) > cfg.schedule_size:
        chosen = sorted(int(k) for k in rng.choice(able, size=cfg.schedule_size, replace=False))
    else:
        chosen = able
    return SchedulingDecision(t, able, chosen, {k: float(f_max[k]) for k in able}, False)


def baseline_allocate(sched: SchedulingDecision, gains: Sequence[float], cfg: SystemConfig,
                      profiles: Sequence[DeviceProfile]) -> AggregationDecision:
    """Full power on ``1/schedule_size`` of the band; late devices are dropped."""
    share = 1.0 / cfg.schedule_size
    keep, dropped = [], []
    for k in sched.scheduled:
        left = cfg.round_limit - cfg.cpu_cycles / sched.frequencies[k]
        rate = tx_rate(share, profiles[k].max_power, gains[k], cfg)
        if rate <= 0 or cfg.model_bits / rate > left:
            dropped.append(k)
        else:
            keep.append(k)
    return AggregationDecision(
        keep, {}, {k: share for k in keep}, {k: profiles[k].max_power for k in keep}, dropped
    )


def baseline_random(t: int, cfg: SystemConfig, profiles: Sequence[DeviceProfile], f_max: Sequence[float],
                    gains: Sequence[float], rng: RngStream) -> tuple[SchedulingDecision, AggregationDecision]:
    sched = baseline_schedule(t, cfg, f_max, rng)
    return sched, baseline_allocate(sched, gains, cfg, profiles)
