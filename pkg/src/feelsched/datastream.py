"""Streaming training data: synthetic labelled pools, arrival schedules,
accumulated datasets and the data-importance metric."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .numerics import RngStream, sample_truncated_gaussian, sample_truncated_poisson

PATTERNS = ("uniform", "truncated-poisson", "truncated-gaussian")


@dataclass(frozen=True)
class SampleBatch:
    """Column-wise block of labelled samples (one row per sample)."""

    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, idx) -> "SampleBatch":
        return SampleBatch(self.features[idx], self.labels[idx], self.targets[idx])

    @classmethod
    def empty(cls, num_features: int) -> "SampleBatch":
        return cls(np.zeros((0, num_features)), np.zeros(0, dtype=int), np.zeros(0))

    @classmethod
    def concat(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        return cls(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.targets for b in batches]),
        )


@dataclass(frozen=True)
class SyntheticDataModel:
    """Class-conditional Gaussian features with a per-class linear target.

    ``x ~ N(class_means[y], feature_sd^2 I)`` and
    ``target = x @ class_weights[y] + N(0, target_noise^2)``.
    """

    class_means: np.ndarray
    class_weights: np.ndarray
    feature_sd: float = 1.0
    target_noise: float = 0.1

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def num_features(self) -> int:
        return self.class_means.shape[1]

    @classmethod
    def generate(cls, rng: RngStream, num_classes: int = 10, num_features: int = 20,
                 separation: float = 1.5) -> "SyntheticDataModel":
        means = rng.normal(0.0, separation, (num_classes, num_features))
        weights = rng.normal(0.0, 1.0 / math.sqrt(num_features), (num_classes, num_features))
        return cls(means, weights)

    def sample(self, labels: np.ndarray, rng: RngStream) -> SampleBatch:
        labels = np.asarray(labels, dtype=int)
        x = self.class_means[labels] + self.feature_sd * rng.normal(size=(labels.size, self.num_features))
        y = np.einsum("ij,ij->i", x, self.class_weights[labels]) + self.target_noise * rng.normal(size=labels.size)
        return SampleBatch(x, labels, y)


def device_label_counts(n: int, num_classes: int, split: str, max_labels: int, rng: RngStream) -> np.ndarray:
    """How many of a device's ``n`` samples carry each label."""
    if split == "iid":
        return rng.generator.multinomial(n, np.full(num_classes, 1.0 / num_classes))
    if split == "non-iid":
        chosen = rng.choice(num_classes, size=min(max_labels, num_classes), replace=False)
        counts = np.zeros(num_classes, dtype=int)
        counts[chosen] = rng.generator.multinomial(n, np.full(chosen.size, 1.0 / chosen.size))
        return counts
    raise ValueError(f"unknown split {split!r}")


def build_device_pool(n: int, model: SyntheticDataModel, split: str, max_labels: int, rng: RngStream) -> SampleBatch:
    """A device's whole allotment, ordered by label.

    Labels follow the cyclic order ``first, first+1, ...`` where ``first``
    is picked uniformly among the labels the device holds.
    """
    m = model.num_classes
    counts = device_label_counts(n, m, split, max_labels, rng)
    held = np.flatnonzero(counts)
    if held.size == 0:
        return SampleBatch.empty(model.num_features)
    first = int(rng.choice(held))
    order = [(first + j) % m for j in range(m)]
    labels = np.concatenate([np.full(counts[c], c, dtype=int) for c in order])
    return model.sample(labels, rng)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    if total == 0:
        return np.zeros(weights.size, dtype=int)
    if weights.sum() <= 0:
        weights = np.ones(weights.size)
    counts = np.floor(total * weights / weights.sum()).astype(int)
    short = total - counts.sum()
    counts[:short] += 1  # rounding residue goes to the earliest rounds
    return counts


def arrival_schedule(total: int, rounds: int, pattern: str, rng: RngStream,
                     gaussian_sd_fraction: float = 0.25, sampled: bool = False) -> np.ndarray:
    """Per-round arrival counts (index 0 is round 1) summing to ``total``.

    ``uniform`` splits evenly. The truncated patterns centre the arrival
    density on ``mu ~ U(0, rounds)`` on the support ``[0, rounds]``: by
    default counts follow the normalised density at each round, with
    ``sampled=True`` each sample's arrival round is drawn independently.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown arrival pattern {pattern!r}")
    if total < 0 or rounds < 1:
        raise ValueError("need total >= 0 and rounds >= 1")
    if pattern == "uniform":
        return _apportion(total, np.ones(rounds))
    mu = rng.uniform(0.0, rounds)
    t = np.arange(1, rounds + 1)
    sd = gaussian_sd_fraction * rounds
    if sampled:
        if pattern == "truncated-gaussian":
            x = sample_truncated_gaussian(mu, sd, 0.0, float(rounds), rng, size=total) if total else np.zeros(0)
            r = np.clip(np.ceil(x), 1, rounds).astype(int)
        else:
            r = sample_truncated_poisson(mu, rounds, rng, size=total) if total else np.zeros(0, dtype=int)
            r = np.maximum(r, 1)
        return np.bincount(r - 1, minlength=rounds)[:rounds]
    if pattern == "truncated-gaussian":
        w = stats.norm.pdf(t, loc=mu, scale=sd)
    else:
        w = stats.poisson.pmf(t, mu)
    return _apportion(total, w)


@dataclass
class StreamingDataset:
    """Accumulated dataset ``S_k(t)`` of one device.

    The device's samples are fixed up front in ``pool`` (label-ordered);
    the arrival schedule decides how much of the prefix is revealed at each
    round, so accumulation is append-only by construction.
    """

    device: int
    pool: SampleBatch
    schedule: np.ndarray
    num_classes: int
    size: int = 0
    last_arrivals: int = 0
    round: int = 0

    def __post_init__(self):
        if int(np.sum(self.schedule)) > len(self.pool):
            raise ValueError("arrival schedule exceeds the device's allotment")

    @property
    def allotment(self) -> int:
        return int(np.sum(self.schedule))

    @property
    def accumulated(self) -> SampleBatch:
        return self.pool[: self.size]

    @property
    def new_arrivals(self) -> SampleBatch:
        return self.pool[self.size - self.last_arrivals: self.size]

    def label_counts(self, upto: int | None = None) -> np.ndarray:
        n = self.size if upto is None else upto
        return np.bincount(self.pool.labels[:n], minlength=self.num_classes)

    def advance(self, t: int) -> SampleBatch:
        if t != self.round + 1:
            raise ValueError(f"rounds must advance one at a time (at {self.round}, asked {t})")
        self.round = t
        n_new = int(self.schedule[t - 1]) if t <= len(self.schedule) else 0
        n_new = min(n_new, self.allotment - self.size)
        self.size += n_new
        self.last_arrivals = n_new
        return self.new_arrivals


def generate_round_arrivals(dataset: StreamingDataset, t: int) -> SampleBatch:
    """Reveal and return ``B_k(t)``; empty once the allotment is used up."""
    return dataset.advance(t)


def label_feature(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Relative deviation of each label count from the mean count."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=num_classes).astype(float)
    return feature_from_counts(counts)


def feature_from_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    mean = counts.mean() if counts.size else 0.0
    if mean <= 0:
        return np.zeros(counts.size)
    return (counts - mean) / mean


def dissimilarity(x: np.ndarray, y: np.ndarray) -> float:
    """``||x - y||^2 / (||x||^2 + ||y||^2)``, zero when both vectors vanish."""
    denom = float(x @ x + y @ y)
    if denom == 0.0:
        return 0.0
    d = x - y
    return float(d @ d) / denom


class ExploitedSetTracker:
    """Remembers, per device, the dataset snapshot at its last aggregated round."""

    def __init__(self, num_devices: int, num_classes: int):
        self.last_round: list[int | None] = [None] * num_devices
        self.snapshot_sizes = np.zeros(num_devices, dtype=int)
        self.snapshot_counts = np.zeros((num_devices, num_classes), dtype=int)

    def record(self, k: int, t: int, dataset: StreamingDataset) -> None:
        self.last_round[k] = t
        self.snapshot_sizes[k] = dataset.size
        self.snapshot_counts[k] = dataset.label_counts()

    def exploited_counts(self) -> np.ndarray:
        return self.snapshot_counts.sum(axis=0)


def importance_terms(t: int, feasible: Sequence[int], new_counts: Mapping[int, np.ndarray],
                     exploited_counts: np.ndarray) -> tuple[dict[int, float], dict[int, float]]:
    """Arrival-volume and label-dissimilarity terms for every feasible device."""
    sizes = {k: int(np.sum(new_counts[k])) for k in feasible}
    total = sum(sizes.values())
    x = feature_from_counts(exploited_counts)
    arrival, dissim = {}, {}
    for k in feasible:
        arrival[k] = len(feasible) * sizes[k] / total if total > 0 else 0.0
        dissim[k] = dissimilarity(x, feature_from_counts(new_counts[k])) if t > 1 else 0.0
    return arrival, dissim


def importance(k: int, t: int, feasible: Sequence[int], tracker: ExploitedSetTracker,
               datasets: Sequence[StreamingDataset]) -> float:
    counts = {j: np.bincount(datasets[j].new_arrivals.labels, minlength=datasets[j].num_classes)
              for j in feasible}
    arrival, dissim = importance_terms(t, feasible, counts, tracker.exploited_counts())
    return arrival[k] + dissim[k]


def dump_datasets(path: str | Path, datasets: Sequence[StreamingDataset]) -> None:
    """Write every device's pool as CSV rows ``round, device, label, target, x0..``.

    ``round`` is the scheduled arrival round (0 for samples never released).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        p = datasets[0].pool.features.shape[1] if datasets else 0
        w.writerow(["round", "device", "label", "target"] + [f"x{i}" for i in range(p)])
        for ds in datasets:
            rounds = np.zeros(len(ds.pool), dtype=int)
            edges = np.cumsum(ds.schedule)
            start = 0
            for r, end in enumerate(edges, start=1):
                rounds[start:end] = r
                start = end
            for i in range(len(ds.pool)):
                w.writerow([int(rounds[i]), ds.device, int(ds.pool.labels[i]), repr(float(ds.pool.targets[i]))]
                           + [repr(float(v)) for v in ds.pool.features[i]])


def load_datasets(path: str | Path, num_classes: int, num_rounds: int | None = None) -> list[StreamingDataset]:
    """Inverse of :func:`dump_datasets`; datasets come back un-advanced."""
    rows: dict[int, list[list[str]]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            rows.setdefault(int(row[1]), []).append(row)
    out = []
    for dev in sorted(rows):
        data = rows[dev]
        rnd = np.array([int(x[0]) for x in data])
        batch = SampleBatch(
            np.array([[float(v) for v in x[4:]] for x in data]).reshape(len(data), -1),
            np.array([int(x[2]) for x in data]),
            np.array([float(x[3]) for x in data]),
        )
        horizon = num_rounds or int(rnd.max(initial=0))
        sched = np.bincount(rnd[rnd > 0] - 1, minlength=horizon)
        out.append(StreamingDataset(dev, batch, sched, num_classes))
    return out
