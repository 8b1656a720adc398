"""Training tasks with exact gradients and their assumption constants.

A task owns a dataset split across devices. The global loss is the
sample-weighted mean of the local losses,

    F(w) = sum_k (D_k / D_A) F_k(w),

and every task reports the constants the convergence analysis needs:
smoothness L, strong convexity M (0 when not convex), the gradient bound
G and the angle cap theta_th. An optional held-out set, never seen by any
device, gives the test loss (and accuracy for classifiers) of a model.
"""
from __future__ import annotations

import copy
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from otafl.datasets import (DataPartition, Dataset, load_idx_dataset, make_blobs, partition_data,
                            split_holdout)
from otafl.errors import InvalidArgumentError
from otafl.numerics import RandomStream, as_vector

logger = logging.getLogger(__name__)

UNDEFINED_ANGLE = math.nan
GRADIENT_BOUND_SAFETY = 1.5
SMOOTHNESS_SAFETY = 2.0
MAX_DESK_PARAMETERS = 10_000


@dataclass(frozen=True)
class TaskConstants:
    L: float
    M: float
    G: float
    theta_th: float = math.pi / 3

    def __post_init__(self) -> None:
        if not self.L > 0:
            raise InvalidArgumentError(f"smoothness L must be positive, got {self.L}")
        if self.M < 0:
            raise InvalidArgumentError(f"strong convexity M must be >= 0, got {self.M}")
        if self.M > self.L * (1 + 1e-12):
            raise InvalidArgumentError(f"M={self.M} exceeds L={self.L}")
        if not self.G > 0:
            raise InvalidArgumentError(f"gradient bound G must be positive, got {self.G}")
        if not 0 <= self.theta_th < math.pi / 2:
            raise InvalidArgumentError(f"theta_th must lie in [0, pi/2), got {self.theta_th}")


@dataclass(frozen=True)
class Optimum:
    w_star: np.ndarray
    F_star: float


class TrainingTask(ABC):
    """Loss and gradient evaluators over a partitioned dataset."""

    kind = "task"

    def __init__(self, dataset: Dataset, partition: DataPartition, w_init: np.ndarray) -> None:
        if partition.total != len(dataset):
            raise InvalidArgumentError(
                f"partition covers {partition.total} samples, dataset has {len(dataset)}")
        self.dataset = dataset
        self.partition = partition
        self.w_init = as_vector(w_init, name="w_init")
        self._all = np.arange(len(dataset))
        self.constants: TaskConstants | None = None
        self.optimum: Optimum | None = None
        self.holdout: Dataset | None = None

    # -- evaluators -----------------------------------------------------

    @abstractmethod
    def _loss_grad(self, w: np.ndarray, idx: np.ndarray, need_grad: bool = True
                   ) -> tuple[float, np.ndarray | None]:
        """Mean loss (and gradient) over the samples ``idx``, regularizer included."""

    @abstractmethod
    def _holdout_metrics(self, w: np.ndarray, data: Dataset) -> tuple[float, float | None]:
        """Unregularized mean loss and accuracy (None when undefined) on ``data``."""

    @property
    def dim(self) -> int:
        return int(self.w_init.size)

    @property
    def num_devices(self) -> int:
        return len(self.partition)

    @property
    def weights(self) -> np.ndarray:
        return self.partition.weights

    def loss(self, w: np.ndarray) -> float:
        return self._loss_grad(np.asarray(w, dtype=np.float64), self._all, need_grad=False)[0]

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self._loss_grad(np.asarray(w, dtype=np.float64), self._all)[1]

    def holdout_metrics(self, w: np.ndarray) -> tuple[float | None, float | None]:
        """Held-out loss and accuracy of ``w``; both None without a held-out set."""
        if self.holdout is None:
            return None, None
        return self._holdout_metrics(np.asarray(w, dtype=np.float64), self.holdout)

    def local_loss(self, k: int, w: np.ndarray) -> float:
        return self._loss_grad(np.asarray(w, dtype=np.float64), self.partition.parts[k],
                               need_grad=False)[0]

    def local_grad(self, k: int, w: np.ndarray) -> np.ndarray:
        return self._loss_grad(np.asarray(w, dtype=np.float64), self.partition.parts[k])[1]

    def local_grads(self, w: np.ndarray) -> np.ndarray:
        """K x dim matrix of full local gradients."""
        return np.stack([self.local_grad(k, w) for k in range(self.num_devices)])

    def batch_grad(self, k: int, w: np.ndarray, stream: RandomStream, batch_size: int) -> np.ndarray:
        """Mini-batch local gradient; draws without replacement from device k's samples."""
        part = self.partition.parts[k]
        if batch_size >= part.size:
            return self.local_grad(k, w)
        idx = stream.generator().choice(part, size=batch_size, replace=False)
        return self._loss_grad(np.asarray(w, dtype=np.float64), np.sort(idx))[1]

    # -- constants ------------------------------------------------------

    def require_constants(self) -> TaskConstants:
        if self.constants is None:
            raise InvalidArgumentError(f"{self.kind} task has no constants yet")
        return self.constants

    def with_constants(self, **changes: float) -> "TrainingTask":
        """Shallow copy with some constants replaced (e.g. a measured theta_th)."""
        clone = copy.copy(self)
        clone.constants = replace(self.require_constants(), **changes)
        return clone


# ---------------------------------------------------------------------------
# Ridge regression (smooth, strongly convex)
# ---------------------------------------------------------------------------

class RidgeTask(TrainingTask):
    kind = "ridge"

    def __init__(self, dataset: Dataset, partition: DataPartition, ridge_coeff: float,
                 theta_th: float = math.pi / 3, G: float | None = None,
                 w_init: np.ndarray | None = None, warmup_rounds: int = 200) -> None:
        if ridge_coeff < 0:
            raise InvalidArgumentError(f"ridge coefficient must be >= 0, got {ridge_coeff}")
        dim = dataset.features.shape[1]
        super().__init__(dataset, partition, np.zeros(dim) if w_init is None else w_init)
        self.ridge_coeff = float(ridge_coeff)
        self._targets = dataset.labels.astype(np.float64)

        X, y, n = dataset.features, self._targets, len(dataset)
        gram = X.T @ X / n
        eig = linalg.eigvalsh(gram)
        L = float(eig[-1]) + self.ridge_coeff
        M = max(float(eig[0]), 0.0) + self.ridge_coeff

        rhs = X.T @ y / n
        system = gram + self.ridge_coeff * np.eye(dim)
        if M > 0:
            w_star = linalg.solve(system, rhs, assume_a="pos")
        else:
            w_star = linalg.lstsq(system, rhs)[0]
        self.optimum = Optimum(w_star=as_vector(w_star, name="w_star"), F_star=self.loss(w_star))

        if G is None:
            G = calibrate_gradient_bound(self, rounds=warmup_rounds, step=1.0 / L, p=0.0)
        self.constants = TaskConstants(L=L, M=M, G=G, theta_th=theta_th)

    def _loss_grad(self, w, idx, need_grad=True):
        X = self.dataset.features[idx]
        residual = X @ w - self._targets[idx]
        loss = 0.5 * float(residual @ residual) / idx.size + 0.5 * self.ridge_coeff * float(w @ w)
        if not need_grad:
            return loss, None
        return loss, X.T @ residual / idx.size + self.ridge_coeff * w

    def _holdout_metrics(self, w, data):
        residual = data.features @ w - data.labels.astype(np.float64)
        return 0.5 * float(residual @ residual) / len(data), None


def make_ridge_task(stream: RandomStream, num_devices: int, samples_per_device: int, dim: int,
                    noise_std: float, ridge_coeff: float, *, theta_th: float = math.pi / 3,
                    skew: float = 0.0, warmup_rounds: int = 200,
                    test_fraction: float = 0.0) -> RidgeTask:
    """Synthetic linear data ``y = X w_true + noise`` split over devices.

    The held-out set has ``test_fraction`` times as many samples, drawn
    from the same model on a separate stream.
    """
    if min(num_devices, samples_per_device, dim) < 1 or noise_std < 0 or ridge_coeff <= 0:
        raise InvalidArgumentError("ridge task sizes and ridge coefficient must be positive")
    rng = stream.child(purpose="ridge-data").generator()
    n = num_devices * samples_per_device
    w_true = rng.normal(0.0, 1.0 / math.sqrt(dim), size=dim)
    X = rng.normal(0.0, 1.0, size=(n, dim))
    y = X @ w_true + noise_std * rng.normal(size=n)
    dataset = Dataset(features=X, labels=y)
    partition = partition_data(stream.child(purpose="partition"), dataset, num_devices, skew)
    task = RidgeTask(dataset, partition, ridge_coeff, theta_th=theta_th,
                     warmup_rounds=warmup_rounds)
    n_test = _holdout_size(test_fraction, n)
    if n_test:
        test_rng = stream.child(purpose="ridge-holdout").generator()
        X_test = test_rng.normal(0.0, 1.0, size=(n_test, dim))
        y_test = X_test @ w_true + noise_std * test_rng.normal(size=n_test)
        task.holdout = Dataset(features=X_test, labels=y_test)
    logger.info("ridge task: D_A=%d dim=%d L=%.4g M=%.4g G=%.4g", n, dim,
                task.constants.L, task.constants.M, task.constants.G)
    return task


# ---------------------------------------------------------------------------
# Smooth nonconvex classifier
# ---------------------------------------------------------------------------

class ClassifierTask(TrainingTask):
    """Three fully connected layers with tanh activations and a softmax output."""

    kind = "classifier"

    def __init__(self, dataset: Dataset, partition: DataPartition, hidden: int, classes: int,
                 stream: RandomStream) -> None:
        dim_in = dataset.features.shape[1]
        self.shapes = [(dim_in, hidden), (hidden,), (hidden, hidden), (hidden,),
                       (hidden, classes), (classes,)]
        rng = stream.child(purpose="init").generator()
        pieces = []
        for shape in self.shapes:
            if len(shape) == 2:
                pieces.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape).ravel())
            else:
                pieces.append(np.zeros(shape))
        super().__init__(dataset, partition, np.concatenate(pieces))
        self.classes = classes
        self._labels = dataset.labels.astype(np.int64)
        if self._labels.min() < 0 or self._labels.max() >= classes:
            raise InvalidArgumentError(f"labels must lie in [0, {classes})")

    def _unpack(self, w: np.ndarray) -> list[np.ndarray]:
        out, start = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(w[start:start + size].reshape(shape))
            start += size
        return out

    def _forward(self, w: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        W1, b1, W2, b2, W3, b3 = self._unpack(w)
        a1 = np.tanh(X @ W1 + b1)
        a2 = np.tanh(a1 @ W2 + b2)
        return a1, a2, a2 @ W3 + b3

    def _loss_grad(self, w, idx, need_grad=True):
        _, _, W2, _, W3, _ = self._unpack(w)
        X, y = self.dataset.features[idx], self._labels[idx]
        n = idx.size
        rows = np.arange(n)

        a1, a2, logits = self._forward(w, X)
        loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, y]))
        if not need_grad:
            return loss, None

        d3 = softmax(logits, axis=1)
        d3[rows, y] -= 1.0
        d3 /= n
        dz2 = (d3 @ W3.T) * (1.0 - a2 ** 2)
        dz1 = (dz2 @ W2.T) * (1.0 - a1 ** 2)
        grads = [X.T @ dz1, dz1.sum(axis=0), a1.T @ dz2, dz2.sum(axis=0),
                 a2.T @ d3, d3.sum(axis=0)]
        return loss, np.concatenate([g.ravel() for g in grads])

    def _holdout_metrics(self, w, data):
        y = data.labels.astype(np.int64)
        logits = self._forward(w, data.features)[2]
        loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(y.size), y]))
        return loss, float(np.mean(np.argmax(logits, axis=1) == y))


def _holdout_size(fraction: float, n: int) -> int:
    if not 0.0 <= fraction < 1.0:
        raise InvalidArgumentError(f"test_fraction must lie in [0, 1), got {fraction}")
    return int(round(fraction * n))


def _finish_classifier(task: ClassifierTask, stream: RandomStream, theta_th: float,
                       warmup_rounds: int, smoothness_pairs: int) -> ClassifierTask:
    G, trajectory = calibrate_gradient_bound(task, rounds=warmup_rounds, step=1.0, p=0.75,
                                             return_trajectory=True)
    L = estimate_smoothness(task, trajectory, stream.child(purpose="smoothness"),
                            pairs=smoothness_pairs)
    task.constants = TaskConstants(L=L, M=0.0, G=G, theta_th=theta_th)
    logger.info("classifier task: D_A=%d params=%d L=%.4g G=%.4g", len(task.dataset),
                task.dim, L, G)
    return task


def make_nonconvex_task(stream: RandomStream, num_devices: int, samples_per_device: int,
                        dim_in: int, hidden: int, classes: int, *,
                        theta_th: float = math.pi / 3, skew: float = 0.0,
                        warmup_rounds: int = 100, smoothness_pairs: int = 10_000,
                        test_fraction: float = 0.0) -> ClassifierTask:
    """Desk-scale smooth classifier on Gaussian blobs.

    ``test_fraction`` times the training size is drawn on top and held out.
    """
    if min(num_devices, samples_per_device, dim_in, hidden, classes) < 1:
        raise InvalidArgumentError("classifier task sizes must be positive")
    n_params = dim_in * hidden + hidden + hidden * hidden + hidden + hidden * classes + classes
    if n_params > MAX_DESK_PARAMETERS:
        raise InvalidArgumentError(
            f"{n_params} parameters exceed the desk-scale limit of {MAX_DESK_PARAMETERS}")
    n_train = num_devices * samples_per_device
    n_test = _holdout_size(test_fraction, n_train)
    full = make_blobs(stream.child(purpose="blobs"), n_train + n_test, dim_in, classes)
    dataset, holdout = split_holdout(stream.child(purpose="holdout"), full, n_test)
    partition = partition_data(stream.child(purpose="partition"), dataset, num_devices, skew)
    task = ClassifierTask(dataset, partition, hidden, classes, stream)
    task.holdout = holdout
    return _finish_classifier(task, stream, theta_th, warmup_rounds, smoothness_pairs)


def make_idx_task(stream: RandomStream, images_path: str, labels_path: str, num_devices: int,
                  hidden: int, *, limit: int | None = None, theta_th: float = math.pi / 3,
                  skew: float = 0.0, warmup_rounds: int = 50,
                  smoothness_pairs: int = 1_000, test_fraction: float = 0.0) -> ClassifierTask:
    """The smooth classifier on IDX (MNIST-layout) data; ten classes.

    ``test_fraction`` of the loaded samples are held out before partitioning.
    """
    full = load_idx_dataset(images_path, labels_path, limit=limit)
    dataset, holdout = split_holdout(stream.child(purpose="holdout"), full,
                                     _holdout_size(test_fraction, len(full)))
    partition = partition_data(stream.child(purpose="partition"), dataset, num_devices, skew)
    task = ClassifierTask(dataset, partition, hidden, 10, stream)
    task.holdout = holdout
    return _finish_classifier(task, stream, theta_th, warmup_rounds, smoothness_pairs)


# ---------------------------------------------------------------------------
# Constant estimation and angle measurement
# ---------------------------------------------------------------------------

def calibrate_gradient_bound(task: TrainingTask, rounds: int, step: float, p: float,
                             safety: float = GRADIENT_BOUND_SAFETY,
                             return_trajectory: bool = False):
    """G from a noise-free warm-up run.

    Runs ``w <- w - step/t^p * grad/max(1, ||grad||)`` from ``task.w_init``
    and returns ``safety`` times the largest local gradient norm seen.
    """
    w = task.w_init.copy()
    trajectory = [w.copy()]
    largest = 0.0
    for t in range(1, rounds + 1):
        local = task.local_grads(w)
        largest = max(largest, float(np.max(np.linalg.norm(local, axis=1))))
        g = task.weights @ local
        w = w - step / t ** p * g / max(1.0, float(np.linalg.norm(g)))
        trajectory.append(w.copy())
    largest = max(largest, float(np.max(np.linalg.norm(task.local_grads(w), axis=1))))
    G = safety * largest if largest > 0 else 1.0
    if return_trajectory:
        return G, np.array(trajectory)
    return G


def estimate_smoothness(task: TrainingTask, anchors: np.ndarray, stream: RandomStream,
                        pairs: int = 10_000, radius: float = 0.5,
                        safety: float = SMOOTHNESS_SAFETY) -> float:
    """Empirical Lipschitz constant of the gradient around visited points."""
    rng = stream.generator()
    anchors = np.atleast_2d(anchors)
    scale = radius / math.sqrt(task.dim)
    best = 0.0
    for _ in range(pairs):
        base = anchors[rng.integers(len(anchors))]
        w1 = base + rng.normal(0.0, scale, size=task.dim)
        w2 = base + rng.normal(0.0, scale, size=task.dim)
        gap = float(np.linalg.norm(w1 - w2))
        if gap == 0:
            continue
        best = max(best, float(np.linalg.norm(task.grad(w1) - task.grad(w2))) / gap)
    return safety * best if best > 0 else 1.0


def measure_theta(task: TrainingTask, w: np.ndarray,
                  local_grads: np.ndarray | None = None) -> np.ndarray:
    """Angle between each local gradient and the global gradient.

    Entries are ``UNDEFINED_ANGLE`` (NaN) when either gradient is zero.
    """
    local = task.local_grads(w) if local_grads is None else np.asarray(local_grads)
    global_grad = task.weights @ local
    g_norm = float(np.linalg.norm(global_grad))
    angles = np.full(local.shape[0], UNDEFINED_ANGLE)
    if g_norm == 0:
        return angles
    norms = np.linalg.norm(local, axis=1)
    ok = norms > 0
    cosines = (local[ok] @ global_grad) / (norms[ok] * g_norm)
    angles[ok] = np.arccos(np.clip(cosines, -1.0, 1.0))
    return angles


def max_defined_angle(angles: np.ndarray) -> float:
    """Largest defined angle, 0 when none is defined."""
    defined = angles[~np.isnan(angles)]
    return float(defined.max()) if defined.size else 0.0
