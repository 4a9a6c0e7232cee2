"""Federated averaging over streaming datasets with strongly convex tasks."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .datastream import SampleBatch
from .numerics import RngStream


class EmptyDatasetError(ValueError):
    pass


class QuadraticTask:
    """Least squares ``mean_i 0.5 * (x_i @ theta - target_i)**2 + reg/2 |theta|^2``."""

    name = "quadratic"

    def __init__(self, num_features: int, reg: float = 0.0):
        self.num_features = num_features
        self.reg = reg

    @property
    def dim(self) -> int:
        return self.num_features

    def loss(self, theta, batch: SampleBatch) -> float:
        r = batch.features @ theta - batch.targets
        return 0.5 * float(r @ r) / len(batch) + 0.5 * self.reg * float(theta @ theta)

    def grad(self, theta, batch: SampleBatch) -> np.ndarray:
        r = batch.features @ theta - batch.targets
        return batch.features.T @ r / len(batch) + self.reg * theta

    def sample_grads(self, theta, batch: SampleBatch) -> np.ndarray:
        r = batch.features @ theta - batch.targets
        return batch.features * r[:, None] + self.reg * theta[None, :]

    def hessian(self, theta, batch: SampleBatch) -> np.ndarray:
        X = batch.features
        return X.T @ X / len(batch) + self.reg * np.eye(self.dim)

    def curvature(self, batch: SampleBatch) -> tuple[float, float]:
        """Exact ``(L, mu)``: extreme eigenvalues of the constant Hessian."""
        ev = np.linalg.eigvalsh(self.hessian(None, batch))
        return float(ev[-1]), float(ev[0])

    def minimize(self, batch: SampleBatch) -> np.ndarray:
        X = batch.features
        rhs = X.T @ batch.targets / len(batch)
        return np.linalg.solve(self.hessian(None, batch), rhs)


class LogisticTask:
    """Multinomial logistic regression with a bias column and ridge penalty.

    ``theta`` is the flattened ``(num_classes, num_features + 1)`` weight
    matrix; the penalty covers the bias too, which keeps the loss
    ``reg``-strongly convex.
    """

    name = "logistic"

    def __init__(self, num_classes: int, num_features: int, reg: float = 0.1):
        self.num_classes = num_classes
        self.num_features = num_features
        self.reg = reg

    @property
    def dim(self) -> int:
        return self.num_classes * (self.num_features + 1)

    def _design(self, batch):
        return np.hstack([batch.features, np.ones((len(batch), 1))])

    def _probs(self, theta, xt):
        W = theta.reshape(self.num_classes, -1)
        return special.softmax(xt @ W.T, axis=1)

    def loss(self, theta, batch: SampleBatch) -> float:
        xt = self._design(batch)
        z = xt @ theta.reshape(self.num_classes, -1).T
        lse = special.logsumexp(z, axis=1)
        ce = float(np.mean(lse - z[np.arange(len(batch)), batch.labels]))
        return ce + 0.5 * self.reg * float(theta @ theta)

    def grad(self, theta, batch: SampleBatch) -> np.ndarray:
        xt = self._design(batch)
        p = self._probs(theta, xt)
        p[np.arange(len(batch)), batch.labels] -= 1.0
        return (p.T @ xt).ravel() / len(batch) + self.reg * theta

    def hessian(self, theta, batch: SampleBatch) -> np.ndarray:
        xt = self._design(batch)
        p = self._probs(theta, xt)
        m, q, n = self.num_classes, xt.shape[1], len(batch)
        H = np.zeros((m, q, m, q))
        for a in range(m):
            for b in range(a, m):
                c = (p[:, a] if a == b else 0.0) - p[:, a] * p[:, b]
                blk = (xt * c[:, None]).T @ xt / n
                H[a, :, b, :] = blk
                H[b, :, a, :] = blk.T
        return H.reshape(m * q, m * q) + self.reg * np.eye(m * q)

    def curvature(self, batch: SampleBatch) -> tuple[float, float]:
        """Certified ``(L, mu)``: softmax curvature is at most 1/2 per direction."""
        xt = self._design(batch)
        top = float(np.linalg.eigvalsh(xt.T @ xt / len(batch))[-1])
        return self.reg + 0.5 * top, self.reg

    def accuracy(self, theta, batch: SampleBatch) -> float:
        xt = self._design(batch)
        pred = np.argmax(xt @ theta.reshape(self.num_classes, -1).T, axis=1)
        return float(np.mean(pred == batch.labels))

    def minimize(self, batch: SampleBatch, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
        theta = np.zeros(self.dim)
        for _ in range(max_iter):
            g = self.grad(theta, batch)
            if np.linalg.norm(g) <= tol:
                return theta
            step = -np.linalg.solve(self.hessian(theta, batch), g)
            f0 = self.loss(theta, batch)
            s = 1.0
            # near the optimum the loss change drops below rounding; take the pure Newton step
            if -float(g @ step) > 1e-12 * max(1.0, abs(f0)):
                while self.loss(theta + s * step, batch) > f0 + 0.25 * s * float(g @ step) and s > 1e-12:
                    s *= 0.5
            theta = theta + s * step
        if np.linalg.norm(self.grad(theta, batch)) <= tol:
            return theta
        raise RuntimeError("Newton solve for the logistic optimum did not converge")


Task = QuadraticTask | LogisticTask


@dataclass
class LocalUpdate:
    device: int
    delta: np.ndarray
    samples_used: int


def local_sgd(theta: np.ndarray, data: SampleBatch, task: Task, steps: int, minibatch: int,
              lr: float, rng: RngStream, device: int = -1) -> LocalUpdate:
    """Run ``steps`` minibatch SGD steps from ``theta`` and return the model delta.

    Each minibatch is drawn without replacement; a minibatch at least as
    large as the dataset uses every sample and draws nothing from ``rng``.
    """
    n = len(data)
    if n == 0:
        raise EmptyDatasetError(f"device {device} has no data")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    local = np.array(theta, dtype=float)
    used = 0
    for _ in range(steps):
        if minibatch >= n:
            batch = data
        else:
            batch = data[rng.choice(n, size=minibatch, replace=False)]
        used += len(batch)
        local -= lr * task.grad(local, batch)
    return LocalUpdate(device, local - theta, used)


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    return sizes / sizes.sum()


def aggregate(theta: np.ndarray, updates: Sequence[LocalUpdate], weights: Sequence[float]) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if len(updates) != weights.size:
        raise ValueError("one weight per update")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {weights.sum()!r}, not 1")
    new = np.array(theta, dtype=float)
    for w, u in zip(weights, updates):
        new += w * u.delta
    if not np.all(np.isfinite(new)):
        raise ValueError("aggregated model has non-finite entries")
    return new


def global_loss(theta: np.ndarray, datasets: Sequence[SampleBatch], task: Task) -> float:
    """Data-size weighted sum of local losses."""
    sizes = np.array([len(d) for d in datasets], dtype=float)
    if sizes.sum() == 0:
        raise EmptyDatasetError("every dataset is empty")
    return float(sum(s / sizes.sum() * task.loss(theta, d) for s, d in zip(sizes, datasets) if s > 0))


@dataclass
class ExactSolution:
    theta: np.ndarray
    value: float
    local_thetas: list[np.ndarray | None]
    local_values: list[float | None]


def exact_optimizer(datasets: Sequence[SampleBatch], task: Task) -> ExactSolution:
    """Global and per-device minimisers of the current losses.

    The global loss is the size-weighted average, i.e. the task loss on the
    pooled data, so one solve on the concatenation gives the global optimum.
    """
    nonempty = [d for d in datasets if len(d)]
    if not nonempty:
        raise EmptyDatasetError("every dataset is empty")
    pooled = SampleBatch.concat(nonempty)
    theta = task.minimize(pooled)
    locals_, values = [], []
    for d in datasets:
        if len(d):
            th = task.minimize(d)
            locals_.append(th)
            values.append(task.loss(th, d))
        else:
            locals_.append(None)
            values.append(None)
    return ExactSolution(theta, task.loss(theta, pooled), locals_, values)


def save_model(path: str | Path, theta: np.ndarray) -> None:
    """Text checkpoint: ``dim N`` header, then one value per line."""
    theta = np.asarray(theta, dtype=float).ravel()
    with open(path, "w") as fh:
        fh.write(f"dim {theta.size}\n")
        for v in theta:
            fh.write(f"{float(v)!r}\n")


def load_model(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != "dim":
            raise ValueError(f"{path}: missing 'dim N' header")
        vals = np.array([float(line) for line in fh if line.strip()])
    if vals.size != int(head[1]):
        raise ValueError(f"{path}: header says {head[1]} values, found {vals.size}")
    return vals
