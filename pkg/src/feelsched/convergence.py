"""Convergence-bound machinery and the drifting-quadratic benchmark.

The benchmark is built so that every constant in the bound is known
exactly: smoothness and strong convexity from eigenvalues, the gradient
moment constants from enumerating every minibatch, the heterogeneity
levels from enumerating every device subset, and the optimizer drift from
the construction itself.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from . import datastream as ds
from .datastream import SampleBatch
from .fl import Task, exact_optimizer
from .numerics import RngStream, Source
from .scheduler import (
    VirtualQueues,
    baseline_allocate,
    baseline_schedule,
    energy_ledger,
    prune_and_allocate,
    schedule,
    update_queues,
)
from .system import SystemConfig, draw_capacities, draw_channel, make_profiles

SHARED = 2 ** 31 - 1


@dataclass(frozen=True)
class ConvergenceParams:
    L: float
    mu: float
    C1: float
    C2: float
    alpha: float
    m: float
    phi1: float
    phi2: float
    vartheta: float = 0.0

    def __post_init__(self):
        if not (self.L >= self.mu > 0):
            raise ValueError("need L >= mu > 0")
        if self.C1 < 1 or self.C2 < 0:
            raise ValueError("need C1 >= 1 and C2 >= 0")
        if self.m < 0 or self.phi1 < 0 or self.phi2 < 0:
            raise ValueError("m, phi1 and phi2 must be non-negative")
        if not 0.0 <= self.vartheta < 1.0:
            raise ValueError("vartheta must lie in [0, 1)")

    @property
    def omega(self) -> float:
        return 2.0 * (self.phi1 + self.phi2)

    @property
    def C4(self) -> float:
        return 1.0 - self.mu * self.alpha + 2.0 * (self.C1 - 1.0) * self.L ** 2 * self.alpha ** 2

    @property
    def C3(self) -> float:
        a = self.alpha
        return a * self.omega + a * a * (self.C2 + 2.0 * (self.C1 - 1.0) * self.L ** 2 * self.omega / self.mu)

    def max_step(self) -> float:
        """Supremum of admissible learning rates."""
        if self.C1 == 1.0:
            return 1.0 / self.L
        return min(self.mu / (4.0 * (self.C1 - 1.0) * self.L ** 2), 1.0 / self.L)

    def step_size_ok(self) -> bool:
        return 0.0 < self.alpha < self.max_step()

    def kappa(self, t) -> np.ndarray:
        return self.C4 * (1.0 + 2.0 * self.m / (np.asarray(t, dtype=float) + 1.0))

    def asymptote(self) -> float:
        return self.C3 / (1.0 - self.C4)


def choose_t0(params: ConvergenceParams) -> int:
    """Smallest start round strictly above both drift thresholds."""
    c4 = params.C4
    if c4 >= 1.0:
        raise ValueError(f"C4 = {c4} is not below 1")
    m = params.m
    return max(math.floor(m), math.floor(2.0 * m * c4 / ((1.0 - c4) * (1.0 - params.vartheta)))) + 1


def kappa_bar(params: ConvergenceParams, t1: int, t2: int) -> float:
    lo, hi = min(t1, t2), max(t1, t2)
    return float(np.mean(params.kappa(np.arange(lo, hi + 1))))


def theorem_bound(params: ConvergenceParams, t0: int, d0: float, t_max: int) -> dict[str, np.ndarray]:
    """Bound on ``E|theta(t+1) - theta^{t,*}|^2`` for ``t = t0..t_max``.

    ``d0`` is ``|theta(t0) - theta^{t0-1,*}|^2`` (or its expectation).
    Returns arrays ``t``, ``bound``, ``kappa``, ``kbar0`` and ``kbar1``.
    """
    if t0 <= math.floor(params.m):
        raise ValueError(f"t0 = {t0} must exceed floor(m) = {math.floor(params.m)}")
    if not params.step_size_ok():
        raise ValueError(f"learning rate {params.alpha} violates the step-size condition (< {params.max_step()})")
    ts = np.arange(t0, t_max + 1)
    kap = params.kappa(np.arange(0, t_max + 2))
    csum = np.concatenate([[0.0], np.cumsum(kap)])

    def kbar(a, b):
        lo, hi = min(a, b), max(a, b)
        return (csum[hi + 1] - csum[lo]) / (hi - lo + 1)

    bound = np.empty(ts.size)
    kb0 = np.empty(ts.size)
    kb1 = np.empty(ts.size)
    c3, c4, m = params.C3, params.C4, params.m
    for j, t in enumerate(ts):
        k0 = kbar(t0, t)
        k1 = kbar(t0 + 1, t)
        if k1 >= 1.0:
            raise ValueError(f"running contraction factor {k1} >= 1 at t = {t}: the bound is void")
        n = t - t0 + 1
        i = np.arange(t0, t + 1)
        drift = 3.0 * m * c4 * float(np.sum(k1 ** (t - i) / (i + 1.0)))
        bound[j] = k0 ** n * d0 + drift + c3 * (1.0 - k1 ** n) / (1.0 - k1)
        kb0[j], kb1[j] = k0, k1
    return {"t": ts, "bound": bound, "kappa": kap[ts], "kbar0": kb0, "kbar1": kb1}


def lemma3_partial_sums(kappa: float, t_max: int) -> np.ndarray:
    """``s(t) = sum_{i=1..t} kappa^(t-i) / (i+1)`` for ``t = 1..t_max``."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    x = 1.0 / (np.arange(1, t_max + 1) + 1.0)
    # s(t) = kappa * s(t-1) + 1/(t+1)
    return signal.lfilter([1.0], [1.0, -kappa], x)


def drift_magnitude(optimizers: Sequence[np.ndarray]) -> tuple[np.ndarray, float]:
    """Per-round drift ``|theta^{t-1,*} - theta^{t,*}|`` for ``t = 1..T`` and the
    smallest ``m`` with ``drift(t) <= m / (t+1)``.

    ``optimizers[j]`` is ``theta^{j,*}``, starting at ``j = 0``.
    """
    if len(optimizers) < 2:
        raise ValueError("need at least two rounds of optimizers")
    th = np.asarray(optimizers, dtype=float)
    drift = np.linalg.norm(np.diff(th, axis=0), axis=1)
    t = np.arange(1, drift.size + 1)
    return drift, float(np.max(drift * (t + 1.0)))


def heterogeneity(subset: Sequence[int], weights: Sequence[float], datasets: Sequence[SampleBatch], task: Task,
                  solution=None) -> tuple[float, float]:
    """``(Gamma1, Gamma2)`` of a device subset with aggregation weights."""
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("subset weights must sum to 1")
    sol = solution if solution is not None else exact_optimizer(datasets, task)
    g1 = sol.value - sum(wk * sol.local_values[k] for wk, k in zip(w, subset))
    g2 = sol.value - sum(wk * task.loss(sol.theta, datasets[k]) for wk, k in zip(w, subset))
    return float(g1), float(g2)


# ---------------------------------------------------------------------------
# drifting-quadratic benchmark


@dataclass(frozen=True)
class BenchmarkConfig:
    sizes: tuple[int, ...] = (12, 11, 12, 11, 12)
    dim: int = 10
    minibatch_fraction: float = 0.75
    singular_range: tuple[float, float] = (0.9, 1.1)
    center_sd: float = 0.5
    spread_sd: float = 0.1
    noise_sd: float = 0.1
    drift: float = 0.25
    step_fraction: float = 0.5
    c1_margin: float = 1.5
    vartheta: float = 0.0
    rounds: int = 300
    replications: int = 200
    policy: str = "proposed"
    schedule_size: int = 2
    energy_budget: float = 2e-3
    tradeoff: float = 1e-3
    tail_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if max(self.sizes) > 12:
            raise ValueError("exact minibatch enumeration needs at most 12 samples per device")
        if any(n <= self.dim for n in self.sizes):
            raise ValueError("each device needs more samples than dimensions")
        if self.policy not in ("proposed", "full", "baseline-random"):
            raise ValueError(f"unknown policy {self.policy!r}")

    @property
    def num_devices(self) -> int:
        return len(self.sizes)

    def batch(self, k: int) -> int:
        return max(1, min(self.sizes[k], math.ceil(self.minibatch_fraction * self.sizes[k])))


@dataclass
class DeviceMoments:
    """Exact minibatch statistics of one device.

    With ``z = theta - theta_k^{t,*}`` a minibatch gradient is
    ``G[s] @ z - c[s]``; its variance is ``z M z - 2 p z + q``.
    """

    H: np.ndarray
    G: np.ndarray
    c: np.ndarray
    M: np.ndarray
    p: np.ndarray
    q: float

    @classmethod
    def enumerate(cls, A: np.ndarray, e: np.ndarray, b: int) -> "DeviceMoments":
        n = A.shape[0]
        H = A.T @ A / n
        subsets = np.array(list(itertools.combinations(range(n), b)))
        rows = A[subsets]  # (S, b, d)
        G = np.einsum("sbi,sbj->sij", rows, rows) / b
        c = np.einsum("sbi,sb->si", rows, e[subsets]) / b
        D = G - H
        M = np.einsum("sij,sjk->ik", D, D) / len(subsets)
        p = np.einsum("sij,sj->i", D, c) / len(subsets)
        q = float(np.mean(np.einsum("si,si->s", c, c)))
        return cls(H, G, c, M, p, q)

    def variance(self, z: np.ndarray) -> float:
        return float(z @ self.M @ z - 2.0 * self.p @ z + self.q)

    def variance_enumerated(self, z: np.ndarray) -> float:
        g = self.G @ z - self.c
        mean = self.H @ z
        return float(np.mean(np.sum((g - mean) ** 2, axis=1)))


class DriftingQuadratic:
    """Least-squares devices whose optima move as ``theta_k^inf + u / (t+1)``.

    ``A_k = sqrt(n) U S V^T`` fixes the Hessian ``H_k = V S^2 V^T``; the
    residual ``e_k`` lies outside the range of ``A_k`` so minibatch
    gradients stay noisy at the optimum, and targets are
    ``b_k(t) = A_k theta_k^{t,*} + e_k``.
    """

    def __init__(self, cfg: BenchmarkConfig = BenchmarkConfig()):
        self.cfg = cfg
        rng = RngStream.for_device(cfg.seed, 0, Source.SETUP, SHARED)
        d, K = cfg.dim, cfg.num_devices
        self.A, self.e = [], []
        for n in cfg.sizes:
            U, _ = np.linalg.qr(rng.normal(size=(n, d)))
            V, _ = np.linalg.qr(rng.normal(size=(d, d)))
            s = rng.uniform(*cfg.singular_range, size=d)
            self.A.append(math.sqrt(n) * (U * s) @ V.T)
            z = rng.normal(size=n)
            self.e.append(cfg.noise_sd * math.sqrt(n) * (z - U @ (U.T @ z)))
        center = rng.normal(0.0, cfg.center_sd, d)
        self.theta_inf = np.array([center + rng.normal(0.0, cfg.spread_sd, d) for _ in range(K)])
        u = rng.normal(size=d)
        self.u = cfg.drift * u / np.linalg.norm(u)
        self.sizes = np.array(cfg.sizes, dtype=float)
        self.weights = self.sizes / self.sizes.sum()
        self.moments = [DeviceMoments.enumerate(A, e, cfg.batch(k)) for k, (A, e) in enumerate(zip(self.A, self.e))]
        H = np.einsum("k,kij->ij", self.weights, np.array([mo.H for mo in self.moments]))
        self.H_global = H
        rhs = np.einsum("k,kij,kj->i", self.weights, np.array([mo.H for mo in self.moments]), self.theta_inf)
        self.global_inf = np.linalg.solve(H, rhs)

    # exact quantities --------------------------------------------------

    def local_optimum(self, k: int, t: int) -> np.ndarray:
        return self.theta_inf[k] + self.u / (t + 1.0)

    def global_optimum(self, t: int) -> np.ndarray:
        return self.global_inf + self.u / (t + 1.0)

    def targets(self, k: int, t: int) -> np.ndarray:
        return self.A[k] @ self.local_optimum(k, t) + self.e[k]

    def dataset(self, k: int, t: int) -> SampleBatch:
        n = self.cfg.sizes[k]
        return SampleBatch(self.A[k], np.zeros(n, dtype=int), self.targets(k, t))

    def local_loss(self, k: int, theta: np.ndarray, t: int) -> float:
        r = self.A[k] @ theta - self.targets(k, t)
        return 0.5 * float(r @ r) / self.cfg.sizes[k]

    def local_value(self, k: int) -> float:
        return 0.5 * float(self.e[k] @ self.e[k]) / self.cfg.sizes[k]

    def global_value(self, t: int) -> float:
        th = self.global_optimum(t)
        return float(sum(w * self.local_loss(k, th, t) for k, w in enumerate(self.weights)))

    def curvature(self) -> tuple[float, float]:
        ev = np.concatenate([np.linalg.eigvalsh(mo.H) for mo in self.moments])
        return float(ev.max()), float(ev.min())

    def moment_constants(self) -> tuple[float, float]:
        """Exact ``(C1, C2)`` valid for every ``theta``.

        ``C1 - 1`` is ``c1_margin`` times the largest generalised eigenvalue
        of the variance form against ``H^2``; ``C2`` is then the exact
        supremum of ``Var - (C1 - 1)|grad|^2``.
        """
        lam = 0.0
        for mo in self.moments:
            Hi = np.linalg.inv(mo.H)
            lam = max(lam, float(np.linalg.eigvalsh(Hi @ mo.M @ Hi)[-1]))
        c1m = self.cfg.c1_margin * lam
        c2 = 0.0
        for mo in self.moments:
            N = c1m * mo.H @ mo.H - mo.M
            c2 = max(c2, mo.q + float(mo.p @ np.linalg.solve(N, mo.p)))
        return 1.0 + c1m, c2

    def subset_weights(self, subset: Sequence[int]) -> np.ndarray:
        s = self.sizes[list(subset)]
        return s / s.sum()

    def gammas(self, subset: Sequence[int], t: int) -> tuple[float, float]:
        w = self.subset_weights(subset)
        f_star = self.global_value(t)
        th = self.global_optimum(t)
        g1 = f_star - sum(wk * self.local_value(k) for wk, k in zip(w, subset))
        g2 = f_star - sum(wk * self.local_loss(k, th, t) for wk, k in zip(w, subset))
        return float(g1), float(g2)

    def heterogeneity_bounds(self, rounds: Sequence[int]) -> tuple[float, float]:
        """Exact ``(phi1, phi2)``: max ``|Gamma|`` over every nonempty subset and round."""
        K = self.cfg.num_devices
        phi1 = phi2 = 0.0
        for r in range(1, K + 1):
            for sub in itertools.combinations(range(K), r):
                for t in rounds:
                    g1, g2 = self.gammas(sub, t)
                    phi1, phi2 = max(phi1, abs(g1)), max(phi2, abs(g2))
        return phi1, phi2

    def params(self) -> ConvergenceParams:
        cfg = self.cfg
        L, mu = self.curvature()
        C1, C2 = self.moment_constants()
        phi1, phi2 = self.heterogeneity_bounds(range(0, cfg.rounds + 1))
        bound = min(mu / (4.0 * (C1 - 1.0) * L * L), 1.0 / L) if C1 > 1 else 1.0 / L
        return ConvergenceParams(L, mu, C1, C2, cfg.step_fraction * bound, float(np.linalg.norm(self.u)),
                                 phi1, phi2, cfg.vartheta)

    # stochastic gradients -----------------------------------------------

    def mean_gradient(self, theta: np.ndarray, subset: Sequence[int], t: int) -> np.ndarray:
        w = self.subset_weights(subset)
        return sum(wk * self.moments[k].H @ (theta - self.local_optimum(k, t)) for wk, k in zip(w, subset))

    def gradient_variance(self, theta: np.ndarray, subset: Sequence[int], t: int) -> float:
        """Exact ``E|g - g_bar|^2`` over independent per-device minibatches."""
        w = self.subset_weights(subset)
        return float(sum(wk * wk * self.moments[k].variance_enumerated(theta - self.local_optimum(k, t))
                         for wk, k in zip(w, subset)))


# ---------------------------------------------------------------------------
# participation and simulation


def participation_trace(bench: DriftingQuadratic, replication: int) -> list[list[int]]:
    """Aggregated device set of every round under the configured policy.

    The scheduler sees each round's data as entirely new (targets are
    refreshed), so the arrival term is ``|K_f| n_k / sum n`` and the
    label term vanishes.
    """
    cfg = bench.cfg
    K = cfg.num_devices
    if cfg.policy == "full":
        return [list(range(K)) for _ in range(cfg.rounds)]
    sys_cfg = SystemConfig(num_devices=K, schedule_size=cfg.schedule_size, energy_budget=cfg.energy_budget,
                           tradeoff=cfg.tradeoff, total_rounds=cfg.rounds)
    rng = lambda src, k: RngStream.for_device(cfg.seed, replication, src, k)
    profiles = make_profiles(sys_cfg, [rng(Source.SETUP, k) for k in range(K)])
    cap = [rng(Source.CAPACITY, k) for k in range(K)]
    chan = [rng(Source.CHANNEL, k) for k in range(K)]
    sched_rng = rng(Source.SCHEDULING, SHARED)
    queues = VirtualQueues.zeros(K)
    counts = {k: np.array([cfg.sizes[k]]) for k in range(K)}
    trace = []
    for t in range(1, cfg.rounds + 1):
        f_max = draw_capacities(sys_cfg, t, cap).f_max
        if cfg.policy == "proposed":
            imp = lambda feas: ds.importance_terms(t, feas, counts, np.zeros(1))
            sched = schedule(t, sys_cfg, profiles, f_max, queues, imp)
        else:
            sched = baseline_schedule(t, sys_cfg, f_max, sched_rng)
        gains = draw_channel(profiles, t, chan).gain_power
        if cfg.policy == "proposed":
            agg = prune_and_allocate(sched.scheduled, sched.frequencies, gains, queues.backlog, sys_cfg, profiles)
        else:
            agg = baseline_allocate(sched, gains, sys_cfg, profiles)
        queues = update_queues(queues, energy_ledger(sys_cfg, sched, agg, gains).charged, sys_cfg)
        trace.append(list(agg.aggregated))
    return trace


@dataclass
class BoundTrace:
    t: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    kappa: np.ndarray
    kbar0: np.ndarray
    kbar1: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "empirical_mean", "stderr", "bound", "kappa", "kappa_bar_t0", "kappa_bar_t0p1"])
            for row in zip(self.t, self.empirical, self.stderr, self.bound, self.kappa, self.kbar0, self.kbar1):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


@dataclass
class ConvergenceReport:
    params: ConvergenceParams
    t0: int
    d0: float
    trace: BoundTrace
    errors: np.ndarray  # (replications, rounds): |theta(t+1) - theta^{t,*}|^2
    empty_rounds: int
    tail_mean: float
    tail_stderr: float
    asymptote: float
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def summary(self) -> dict:
        p = self.params
        return {
            "L": p.L, "mu": p.mu, "C1": p.C1, "C2": p.C2, "alpha": p.alpha, "m": p.m,
            "phi1": p.phi1, "phi2": p.phi2, "C3": p.C3, "C4": p.C4, "t0": self.t0, "d0": self.d0,
            "tail_mean": self.tail_mean, "tail_stderr": self.tail_stderr, "asymptote": self.asymptote,
            "empty_rounds": self.empty_rounds, "checks": self.checks, "passed": self.passed,
        }


def simulate(bench: DriftingQuadratic, alpha: float,
             traces: Sequence[Sequence[Sequence[int]]]) -> tuple[np.ndarray, np.ndarray]:
    """Single-step federated SGD for every replication at once.

    Returns ``errors[r, t-1] = |theta(t+1) - theta^{t,*}|^2`` and
    ``start_gap[r, t-1] = |theta(t) - theta^{t-1,*}|^2``, from ``theta(1) = 0``.
    """
    cfg = bench.cfg
    R, T, K, d = len(traces), cfg.rounds, cfg.num_devices, cfg.dim
    theta = np.zeros((R, d))
    errors = np.empty((R, T))
    start_gap = np.empty((R, T))  # |theta(t) - theta^{t-1,*}|^2
    rngs = [RngStream.for_device(cfg.seed, 0, Source.MINIBATCH, k) for k in range(K)]
    for t in range(1, T + 1):
        start_gap[:, t - 1] = np.sum((theta - bench.global_optimum(t - 1)) ** 2, axis=1)
        W = np.zeros((R, K))
        for r, tr in enumerate(traces):
            sub = tr[t - 1]
            if sub:
                W[r, sub] = bench.subset_weights(sub)
        step = np.zeros((R, d))
        for k in range(K):
            mo = bench.moments[k]
            idx = rngs[k].integers(0, mo.G.shape[0], size=R)
            z = theta - bench.local_optimum(k, t)
            g = np.einsum("rij,rj->ri", mo.G[idx], z) - mo.c[idx]
            step += W[:, k:k + 1] * g
        theta = theta - alpha * step
        errors[:, t - 1] = np.sum((theta - bench.global_optimum(t)) ** 2, axis=1)
    return errors, start_gap


def verify_convergence(cfg: BenchmarkConfig = BenchmarkConfig(), out: str | Path | None = None) -> ConvergenceReport:
    """Run the benchmark and compare the empirical error with the bound."""
    bench = DriftingQuadratic(cfg)
    params = bench.params()
    if not params.step_size_ok():
        raise ValueError("benchmark learning rate violates the step-size condition")
    t0 = choose_t0(params)
    if t0 > cfg.rounds:
        raise ValueError(f"t0 = {t0} exceeds the number of rounds {cfg.rounds}")
    traces = [participation_trace(bench, r) for r in range(cfg.replications)]
    empty = sum(1 for tr in traces for s in tr if not s)
    errors, start_gap = simulate(bench, params.alpha, traces)
    R = cfg.replications
    d0 = float(start_gap[:, t0 - 1].mean())
    b = theorem_bound(params, t0, d0, cfg.rounds)
    emp = errors[:, t0 - 1:].mean(axis=0)
    se = errors[:, t0 - 1:].std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(emp.size)
    trace = BoundTrace(b["t"], emp, se, b["bound"], b["kappa"], b["kbar0"], b["kbar1"])
    n_tail = max(1, int(round(cfg.tail_fraction * cfg.rounds)))
    tail = errors[:, -n_tail:].mean(axis=1)
    tail_mean = float(tail.mean())
    tail_se = float(tail.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    asym = params.asymptote()
    checks = {
        "bound_dominance": bool(np.all(emp <= b["bound"] + 3.0 * se)),
        "tail_below_asymptote": tail_mean <= asym + 3.0 * tail_se,
        "contraction": bool(np.all(b["kappa"] < 1.0) and np.all(b["kbar0"] < 1.0) and np.all(b["kbar1"] < 1.0)),
        "no_empty_rounds": empty == 0,
    }
    report = ConvergenceReport(params, t0, d0, trace, errors, empty, tail_mean, tail_se, asym, checks)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out / "bound_trace.csv")
    return report
