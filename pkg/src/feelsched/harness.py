"""Experiment orchestration: the per-round timeline, metrics and outputs."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import datastream as ds
from .fl import LocalUpdate, LogisticTask, QuadraticTask, aggregate, global_loss, local_sgd
from .numerics import RngStream, SolverOptions, Source
from .scheduler import (
    AggregationDecision,
    EnergyLedger,
    SchedulingDecision,
    VirtualQueues,
    baseline_allocate,
    baseline_schedule,
    energy_ledger,
    prune_and_allocate,
    schedule,
    update_queues,
)
from .system import SystemConfig, draw_capacities, draw_channel, make_profiles, tomllib, tx_rate

log = logging.getLogger(__name__)

POLICIES = ("proposed", "baseline-random")
TASKS = ("quadratic", "logistic")
SHARED = 2 ** 31 - 1  # device slot for streams not tied to one device


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    system: SystemConfig = field(default_factory=SystemConfig)
    policy: str = "proposed"
    task: str = "logistic"
    arrival: str = "truncated-gaussian"
    split: str = "non-iid"
    max_labels: int = 3
    samples_per_device: int = 300
    num_classes: int = 10
    num_features: int = 20
    logistic_reg: float = 0.1
    quadratic_reg: float = 0.01
    test_samples: int = 2000
    replications: int = 1
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.arrival not in ds.PATTERNS:
            raise ValueError(f"arrival must be one of {ds.PATTERNS}")
        if self.split not in ("iid", "non-iid"):
            raise ValueError("split must be 'iid' or 'non-iid'")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.max_labels < 1 or self.samples_per_device < 0:
            raise ValueError("max_labels must be >= 1 and samples_per_device >= 0")

    def with_overrides(self, system: dict[str, Any] | None = None, **kw) -> "ExperimentSpec":
        kw = {k: v for k, v in kw.items() if v is not None}
        sys_cfg = self.system.with_overrides(**(system or {}))
        return replace(self, system=sys_cfg, **kw)


def load_spec(path: str | Path) -> ExperimentSpec:
    """Experiment spec from TOML: top-level experiment keys, a ``[system]`` table."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    sys_cfg = SystemConfig.from_mapping(data.pop("system", {}))
    known = {f.name for f in fields(ExperimentSpec)} - {"system"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown experiment keys {sorted(unknown)}")
    return ExperimentSpec(system=sys_cfg, **data)


@dataclass
class RoundDecision:
    replication: int
    round: int
    scheduling: SchedulingDecision
    aggregation: AggregationDecision
    ledger: EnergyLedger

    def to_json(self) -> dict[str, Any]:
        s, a = self.scheduling, self.aggregation
        keyed = lambda d: {str(k): v for k, v in sorted(d.items())}
        return {
            "replication": self.replication,
            "round": self.round,
            "feasible": s.feasible,
            "scheduled": s.scheduled,
            "frequencies": keyed(s.frequencies),
            "used_fallback": s.used_fallback,
            "scores": keyed(s.scores),
            "arrival_term": keyed(s.arrival_term),
            "dissimilarity_term": keyed(s.dissimilarity_term),
            "aggregated": a.aggregated,
            "dropped": a.dropped,
            "rho_min": keyed(a.rho_min),
            "rho": keyed(a.rho),
            "power": keyed(a.power),
            "energy_computation": self.ledger.computation.tolist(),
            "energy_transmission": self.ledger.transmission.tolist(),
        }


@dataclass
class MetricsRecord:
    replication: int
    round: int
    policy: str
    loss: float
    accuracy: float
    num_feasible: int
    num_scheduled: int
    num_aggregated: int
    dropping_rate: float
    freq_opt_rate: float
    gamma: float
    epsilon: float
    energy_total: float
    energy_mean: float
    energy_per_scheduled: float
    queue_max: float
    queue_mean: float
    device_energy: np.ndarray = field(repr=False)
    device_queue: np.ndarray = field(repr=False)

    def row(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("device_energy")
        d.pop("device_queue")
        return d


CSV_FIELDS = [f.name for f in fields(MetricsRecord) if f.name not in ("device_energy", "device_queue")]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class Simulation:
    """One replication: device population, data streams and learning state.

    Every random source is a separate stream keyed by replication, source
    and device, so two policies run on the same seed see identical
    arrivals, CPU capacities and channels.
    """

    def __init__(self, spec: ExperimentSpec, replication: int = 0, solver: SolverOptions = SolverOptions()):
        self.spec = spec
        self.cfg = cfg = spec.system
        self.replication = replication
        self.solver = solver
        K = cfg.num_devices
        rng = lambda src, k: RngStream.for_device(spec.seed, replication, src, k)
        self.capacity_rngs = [rng(Source.CAPACITY, k) for k in range(K)]
        self.channel_rngs = [rng(Source.CHANNEL, k) for k in range(K)]
        self.minibatch_rngs = [rng(Source.MINIBATCH, k) for k in range(K)]
        self.scheduling_rng = rng(Source.SCHEDULING, SHARED)
        self.profiles = make_profiles(cfg, [rng(Source.SETUP, k) for k in range(K)])
        self.data_model = ds.SyntheticDataModel.generate(rng(Source.DATA, SHARED), spec.num_classes, spec.num_features)
        self.datasets = []
        for k in range(K):
            pool = ds.build_device_pool(spec.samples_per_device, self.data_model, spec.split, spec.max_labels,
                                        rng(Source.DATA, k))
            sched = ds.arrival_schedule(len(pool), cfg.total_rounds, spec.arrival, rng(Source.ARRIVALS, k))
            self.datasets.append(ds.StreamingDataset(k, pool, sched, spec.num_classes))
        test_rng = rng(Source.TEST, SHARED)
        self.test_set = self.data_model.sample(test_rng.integers(0, spec.num_classes, spec.test_samples), test_rng)
        if spec.task == "logistic":
            self.task = LogisticTask(spec.num_classes, spec.num_features, spec.logistic_reg)
        else:
            self.task = QuadraticTask(spec.num_features, spec.quadratic_reg)
        pooled = [d.pool for d in self.datasets if len(d.pool)]
        if pooled:
            L, _ = self.task.curvature(ds.SampleBatch.concat(pooled))
            if cfg.learning_rate * L >= 2.0:
                log.warning("learning rate %.3g exceeds 2/L = %.3g for the pooled data; SGD may diverge",
                            cfg.learning_rate, 2.0 / L)
        self.theta = np.zeros(self.task.dim)
        self.queues = VirtualQueues.zeros(K)
        self.tracker = ds.ExploitedSetTracker(K, spec.num_classes)
        self.round = 0
        self.decisions: list[RoundDecision] = []

    def _importance(self, t):
        def fn(feasible):
            counts = {k: self.datasets[k].label_counts() - self.datasets[k].label_counts(
                self.datasets[k].size - self.datasets[k].last_arrivals) for k in feasible}
            return ds.importance_terms(t, feasible, counts, self.tracker.exploited_counts())
        return fn

    def run_round(self, t: int | None = None) -> MetricsRecord:
        """Advance one round: arrivals, scheduling, local training, channel,
        allocation, aggregation, energy ledger, queue update."""
        t = self.round + 1 if t is None else t
        if t != self.round + 1:
            raise ValueError(f"expected round {self.round + 1}, got {t}")
        cfg = self.cfg
        for d in self.datasets:
            d.advance(t)
        f_max = draw_capacities(cfg, t, self.capacity_rngs).f_max
        if self.spec.policy == "proposed":
            sched = schedule(t, cfg, self.profiles, f_max, self.queues, self._importance(t))
        else:
            sched = baseline_schedule(t, cfg, f_max, self.scheduling_rng)
        updates: dict[int, LocalUpdate] = {}
        for k in sched.scheduled:
            data = self.datasets[k].accumulated
            if len(data):
                updates[k] = local_sgd(self.theta, data, self.task, cfg.local_sgd_steps, cfg.minibatch_size,
                                       cfg.learning_rate, self.minibatch_rngs[k], device=k)
        # channel state is only revealed after local training
        gains = draw_channel(self.profiles, t, self.channel_rngs).gain_power
        if self.spec.policy == "proposed":
            agg = prune_and_allocate(sched.scheduled, sched.frequencies, gains, self.queues.backlog, cfg,
                                     self.profiles, self.solver) if sched.scheduled else AggregationDecision(
                [], {}, {}, {}, [])
        else:
            agg = baseline_allocate(sched, gains, cfg, self.profiles)
        self._check(sched, agg, gains)
        contrib = [k for k in agg.aggregated if k in updates]
        if contrib:
            sizes = np.array([self.datasets[k].size for k in contrib], dtype=float)
            self.theta = aggregate(self.theta, [updates[k] for k in contrib], sizes / sizes.sum())
        for k in agg.aggregated:
            self.tracker.record(k, t, self.datasets[k])
        ledger = energy_ledger(cfg, sched, agg, gains)
        charged = ledger.charged
        self.queues = update_queues(self.queues, charged, cfg)
        self.round = t
        self.decisions.append(RoundDecision(self.replication, t, sched, agg, ledger))
        return self._record(t, sched, agg, charged)

    def _check(self, sched, agg, gains):
        cfg = self.cfg
        if agg.aggregated and self.spec.policy == "proposed":
            total = sum(agg.rho.values())
            if abs(total - 1.0) > 1e-10:
                raise InvariantViolation(f"bandwidth fractions sum to {total!r}")
        for k in agg.aggregated:
            f = sched.frequencies[k]
            if agg.power[k] > self.profiles[k].max_power + 1e-12:
                raise InvariantViolation(f"device {k} exceeds its power limit")
            latency = cfg.cpu_cycles / f + cfg.model_bits / tx_rate(agg.rho[k], agg.power[k], gains[k], cfg)
            if latency > cfg.round_limit + 1e-9:
                raise InvariantViolation(f"device {k} misses the deadline ({latency!r} s)")
        if not set(agg.aggregated) <= set(sched.scheduled) or not set(sched.scheduled) <= set(sched.feasible):
            raise InvariantViolation("aggregated/scheduled/feasible sets are not nested")

    def _record(self, t, sched, agg, charged) -> MetricsRecord:
        accumulated = [d.accumulated for d in self.datasets]
        if any(len(a) for a in accumulated):
            loss = global_loss(self.theta, accumulated, self.task)
        else:
            loss = math.nan
        acc = self.task.accuracy(self.theta, self.test_set) if isinstance(self.task, LogisticTask) else math.nan
        n_s, n_a = len(sched.scheduled), len(agg.aggregated)
        drop = (n_s - n_a) / n_s if n_s else math.nan
        if self.spec.policy == "proposed" and sched.feasible:
            freq_opt = 0.0 if sched.used_fallback else 1.0
        else:
            freq_opt = math.nan
        total = float(charged.sum())
        return MetricsRecord(
            replication=self.replication, round=t, policy=self.spec.policy, loss=loss, accuracy=acc,
            num_feasible=len(sched.feasible), num_scheduled=n_s, num_aggregated=n_a,
            dropping_rate=drop, freq_opt_rate=freq_opt,
            gamma=self.cfg.time_reserve, epsilon=self.cfg.freq_opt_scaling,
            energy_total=total, energy_mean=total / self.cfg.num_devices,
            energy_per_scheduled=total / n_s if n_s else math.nan,
            queue_max=float(self.queues.backlog.max()), queue_mean=float(self.queues.backlog.mean()),
            device_energy=charged.copy(), device_queue=self.queues.backlog.copy(),
        )

    def run(self) -> list[MetricsRecord]:
        return [self.run_round() for _ in range(self.cfg.total_rounds)]


# ---------------------------------------------------------------------------
# summaries and files


def _mean_se(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": math.nan, "se": math.nan, "n": 0}
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "se": se, "n": int(v.size)}


def replication_summary(records: Sequence[MetricsRecord]) -> dict[str, float]:
    """Scalar outcomes of one replication."""
    energy = np.array([r.device_energy for r in records])
    scheduled = sum(r.num_scheduled for r in records)
    drops = [r.dropping_rate for r in records if not math.isnan(r.dropping_rate)]
    fopt = [r.freq_opt_rate for r in records if not math.isnan(r.freq_opt_rate)]
    last = records[-1]
    return {
        "energy_per_device_round": float(energy.mean()),
        "energy_per_scheduled_device": float(energy.sum() / scheduled) if scheduled else math.nan,
        "max_time_avg_device_energy": float(energy.mean(axis=0).max()),
        "final_max_queue": float(last.device_queue.max()),
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "dropping_rate": float(np.mean(drops)) if drops else math.nan,
        "freq_opt_rate": float(np.mean(fopt)) if fopt else math.nan,
    }


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list[MetricsRecord]
    per_replication: list[dict[str, float]]
    summary: dict[str, Any]
    decisions: list[RoundDecision]
    paths: dict[str, str] = field(default_factory=dict)


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None, keep_decisions: bool = True) -> ExperimentResult:
    """Run every replication and, if ``out`` (or ``spec.out``) is set, write
    metrics.csv, devices.csv, decisions.jsonl, summary.json and per-round
    plot data."""
    records, per_rep, decisions = [], [], []
    for rep in range(spec.replications):
        sim = Simulation(spec, rep)
        recs = sim.run()
        records.extend(recs)
        per_rep.append(replication_summary(recs))
        if keep_decisions:
            decisions.extend(sim.decisions)
        log.info("replication %d done: %s", rep, per_rep[-1])
    summary = {key: _mean_se([p[key] for p in per_rep]) for key in per_rep[0]}
    summary = {"policy": spec.policy, "replications": spec.replications, "seed": spec.seed, "metrics": summary}
    result = ExperimentResult(spec, records, per_rep, summary, decisions)
    out = out if out is not None else spec.out
    if out is not None:
        result.paths = write_outputs(result, Path(out))
    return result


def _per_round(records, attr):
    rounds = sorted({r.round for r in records})
    rows = []
    for t in rounds:
        s = _mean_se([getattr(r, attr) for r in records if r.round == t])
        rows.append((t, s["mean"], s["se"]))
    return rows


def write_outputs(result: ExperimentResult, out: Path) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    p = out / "metrics.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in result.records:
            row = r.row()
            w.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    paths["metrics"] = str(p)
    p = out / "devices.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "round", "device", "energy", "queue"])
        for r in result.records:
            for k, (e, q) in enumerate(zip(r.device_energy, r.device_queue)):
                w.writerow([r.replication, r.round, k, _fmt(e), _fmt(q)])
    paths["devices"] = str(p)
    if result.decisions:
        p = out / "decisions.jsonl"
        with open(p, "w") as fh:
            for d in result.decisions:
                fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
        paths["decisions"] = str(p)
    for name, attr in (("accuracy_vs_round", "accuracy"), ("energy_vs_round", "energy_mean"),
                       ("loss_vs_round", "loss")):
        p = out / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "mean", "se"])
            for row in _per_round(result.records, attr):
                w.writerow([row[0], _fmt(row[1]), _fmt(row[2])])
        paths[name] = str(p)
    p = out / "summary.json"
    summary = dict(result.summary)
    summary["system"] = result.spec.system.to_dict()
    with open(p, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    paths["summary"] = str(p)
    return paths


def compare_policies(spec: ExperimentSpec, policies: tuple[str, str] = ("proposed", "baseline-random"),
                     out: str | Path | None = None) -> dict[str, Any]:
    """Paired run of two policies on the same seed (common random numbers).

    ``energy_reduction`` is ``1 - E_a / E_b`` on the mean energy per
    scheduled device; deltas are ``a - b``.
    """
    results = {}
    for pol in policies:
        sub = None if out is None else Path(out) / pol
        results[pol] = run_experiment(replace(spec, policy=pol), out=sub, keep_decisions=sub is not None)
    a, b = (results[p].summary["metrics"] for p in policies)
    e_a = a["energy_per_scheduled_device"]["mean"]
    e_b = b["energy_per_scheduled_device"]["mean"]
    report = {
        "policies": list(policies),
        "energy_per_scheduled_device": {policies[0]: e_a, policies[1]: e_b},
        "energy_per_device_round": {p: results[p].summary["metrics"]["energy_per_device_round"]["mean"]
                                    for p in policies},
        "energy_reduction": 1.0 - e_a / e_b if e_b else math.nan,
        "final_loss_delta": a["final_loss"]["mean"] - b["final_loss"]["mean"],
        "final_accuracy_delta": a["final_accuracy"]["mean"] - b["final_accuracy"]["mean"],
        "dropping_rate": {p: results[p].summary["metrics"]["dropping_rate"]["mean"] for p in policies},
    }
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "comparison.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return report
