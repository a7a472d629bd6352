"""Federated tasks, partitioning, local SGD and the error-free baseline.

Two task families are supported:

``quadratic``
    ``f(theta, (x, y)) = 0.5 * (x @ theta - y)**2 + 0.5 * reg * ||theta||**2``.
    Synthetic shards are generated so that every device's empirical Hessian
    has the same spectrum, spanning exactly ``[mu, L]``; optima, minima and
    the heterogeneity gap are then closed-form.
``logistic``
    ``f(theta, (x, y)) = log(1 + exp(-y * x @ theta)) + 0.5 * reg * ||theta||**2``
    with ``y`` in ``{-1, +1}``.  Optima are found with Newton's method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RngStream, StreamLabel, as_model_vector

__all__ = [
    "Dataset",
    "TaskSpec",
    "FederatedTask",
    "LocalUpdate",
    "make_task",
    "task_from_dataset",
    "task_from_shards",
    "partition",
    "local_sgd",
    "aggregate_error_free",
    "global_step",
    "loss_and_grad",
    "load_delimited",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray  # class / cluster id per sample

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.groups[idx])


@dataclass(frozen=True)
class TaskSpec:
    family: str = "quadratic"
    d: int = 50
    samples_per_device: int = 5000
    mu: float = 1.0
    L: float = 5.0
    n_clusters: int = 2
    # spread of the per-cluster ground-truth models around a common one
    heterogeneity: float = 1.0
    noise_std: float = 6.0
    reg: float = 0.0
    # Hessian eigenvalues are mu + (L - mu) * u**spectrum_power, u uniform on [0, 1]
    spectrum_power: float = 3.0
    # 0 gives every device the same Hessian eigenvectors; larger values rotate them apart
    hessian_spread: float = 0.0


@dataclass
class FederatedTask:
    family: str
    shards: list[Dataset]
    reg: float
    mu: float
    L: float
    theta_star: np.ndarray
    F_star: float
    F_m_star: np.ndarray
    Gamma: float
    weights: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return len(self.shards)

    @property
    def d(self) -> int:
        return self.shards[0].X.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards])

    @property
    def equal_shards(self) -> bool:
        return bool(np.all(self.sizes == self.sizes[0]))


@dataclass(frozen=True)
class LocalUpdate:
    delta: np.ndarray
    device: int
    grad_sq_max: float
    grad_sq_mean: float


# -- losses -------------------------------------------------------------------


def _device_loss_grad(family: str, reg: float, X, y, theta):
    z = X @ theta
    n = X.shape[0]
    if family == "quadratic":
        r = z - y
        loss = 0.5 * (r @ r) / n
        grad = X.T @ r / n
    elif family == "logistic":
        m = -y * z
        loss = float(np.mean(np.logaddexp(0.0, m)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * m))  # sigmoid(m), overflow-free
        grad = X.T @ (-y * sig) / n
    else:
        raise ValueError(f"unknown task family {family!r}")
    if reg:
        loss += 0.5 * reg * (theta @ theta)
        grad = grad + reg * theta
    return float(loss), grad


def loss_and_grad(task: FederatedTask, theta, device: int | None = None):
    """Full-batch loss and gradient of one device, or of the size-weighted global objective."""
    theta = as_model_vector(theta, task.d)
    if device is not None:
        s = task.shards[device]
        return _device_loss_grad(task.family, task.reg, s.X, s.y, theta)
    loss = 0.0
    grad = np.zeros(task.d)
    for w, s in zip(task.weights, task.shards):
        f, g = _device_loss_grad(task.family, task.reg, s.X, s.y, theta)
        loss += w * f
        grad += w * g
    return float(loss), grad


def _logistic_hessian(reg, X, y, theta):
    m = -y * (X @ theta)
    sig = 0.5 * (1.0 + np.tanh(0.5 * m))
    wts = sig * (1.0 - sig)
    return (X.T * wts) @ X / X.shape[0] + reg * np.eye(X.shape[1])


def _newton(reg, shards: Sequence[Dataset], weights, d, tol=1e-12, max_iter=100):
    theta = np.zeros(d)
    for _ in range(max_iter):
        grad = np.zeros(d)
        hess = np.zeros((d, d))
        for w, s in zip(weights, shards):
            grad += w * _device_loss_grad("logistic", reg, s.X, s.y, theta)[1]
            hess += w * _logistic_hessian(reg, s.X, s.y, theta)
        step = np.linalg.solve(hess, grad)
        theta = theta - step
        if np.linalg.norm(grad) < tol:
            break
    return theta


# -- partitioning ---------------------------------------------------------------


def partition(dataset: Dataset, M: int, mode: str, rng: RngStream) -> list[Dataset]:
    """Split into ``M`` disjoint shards.

    ``iid`` shuffles and splits evenly.  ``non_iid`` splits every class into
    ``M / C`` groups so each device holds a single class; ``M`` must be a
    multiple of the number of classes ``C``.
    """
    gen = rng.generator()
    n = len(dataset)
    if M < 1 or M > n:
        raise ValueError(f"cannot split {n} samples across M={M} devices")
    if mode == "iid":
        perm = gen.permutation(n)
        return [dataset.subset(np.sort(idx)) for idx in np.array_split(perm, M)]
    if mode != "non_iid":
        raise ValueError(f"unknown partition mode {mode!r}")
    classes = np.unique(dataset.groups)
    C = len(classes)
    if M % C:
        raise ValueError(
            f"non_iid partition needs M divisible by the number of classes: M={M}, classes={C}"
        )
    per_class = M // C
    shards = []
    for c in classes:
        idx = np.flatnonzero(dataset.groups == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than {per_class} devices")
        idx = gen.permutation(idx)
        shards.extend(dataset.subset(np.sort(part)) for part in np.array_split(idx, per_class))
    return shards


# -- task construction ----------------------------------------------------------


def _spectrum(spec: TaskSpec) -> np.ndarray:
    u = np.linspace(0.0, 1.0, spec.d)
    return spec.mu + (spec.L - spec.mu) * u**spec.spectrum_power


def task_from_shards(family: str, shards: list[Dataset], reg: float, mu=None, L=None) -> FederatedTask:
    """Task over the given shards.  ``mu`` and ``L`` default to curvature bounds that hold on every device."""
    sizes = np.array([len(s) for s in shards], dtype=float)
    weights = sizes / sizes.sum()
    d = shards[0].X.shape[1]
    if family == "quadratic":
        hess = [s.X.T @ s.X / len(s) + reg * np.eye(d) for s in shards]
        lin = [s.X.T @ s.y / len(s) for s in shards]
        theta_m = [np.linalg.solve(H, b) for H, b in zip(hess, lin)]
        theta_star = np.linalg.solve(
            sum(w * H for w, H in zip(weights, hess)), sum(w * b for w, b in zip(weights, lin))
        )
        eigs = [np.linalg.eigvalsh(H) for H in hess]
        mu_hat = min(e[0] for e in eigs)
        L_hat = max(e[-1] for e in eigs)
    elif family == "logistic":
        if not reg > 0:
            raise ValueError("logistic tasks need reg > 0 for strong convexity")
        theta_m = [_newton(reg, [s], [1.0], d) for s in shards]
        theta_star = _newton(reg, shards, weights, d)
        mu_hat = reg
        L_hat = reg + max(np.linalg.eigvalsh(s.X.T @ s.X / len(s))[-1] / 4.0 for s in shards)
    else:
        raise ValueError(f"unknown task family {family!r}")
    task = FederatedTask(
        family=family,
        shards=shards,
        reg=reg,
        mu=float(mu_hat if mu is None else mu),
        L=float(L_hat if L is None else L),
        theta_star=theta_star,
        F_star=0.0,
        F_m_star=np.zeros(len(shards)),
        Gamma=0.0,
        weights=weights,
    )
    task.F_m_star = np.array([loss_and_grad(task, th, m)[0] for m, th in enumerate(theta_m)])
    task.F_star = loss_and_grad(task, theta_star)[0]
    task.Gamma = max(0.0, float(task.F_star - weights @ task.F_m_star))
    if not task.equal_shards:
        log.warning(
            "unequal shard sizes %s: the global objective weights devices by size, "
            "while aggregation averages uniformly",
            sorted(set(task.sizes.tolist())),
        )
    return task


def make_task(spec: TaskSpec, M: int, rng: RngStream, partition_mode: str = "iid") -> FederatedTask:
    """Synthetic federated task with ``M`` equal shards."""
    if M < 1:
        raise ValueError(f"M must be positive, got {M}")
    if not 0 < spec.mu <= spec.L:
        raise ValueError(f"need 0 < mu <= L, got mu={spec.mu}, L={spec.L}")
    if spec.n_clusters < 1:
        raise ValueError("n_clusters must be positive")
    d = spec.d
    B = M * spec.samples_per_device
    if B % spec.n_clusters:
        raise ValueError(f"{B} samples do not divide into {spec.n_clusters} equal clusters")
    gen = rng.child(StreamLabel.TASK, 0).generator()
    groups = np.repeat(np.arange(spec.n_clusters), B // spec.n_clusters)
    base = gen.standard_normal(d)
    shifts = spec.heterogeneity * gen.standard_normal((spec.n_clusters, d))
    cluster_models = base + shifts
    raw = Dataset(gen.standard_normal((B, d)), np.zeros(B), groups)
    shards = partition(raw, M, partition_mode, rng.child(StreamLabel.PARTITION, 0))

    if spec.family == "quadratic":
        if spec.reg > spec.mu:
            raise ValueError(f"reg={spec.reg} exceeds mu={spec.mu}")
        if spec.samples_per_device < d:
            raise ValueError(f"samples_per_device={spec.samples_per_device} < d={d}")
        base_dirs = gen.standard_normal((d, d))
        sqrt_eig = np.sqrt(_spectrum(spec) - spec.reg)
        shaped = []
        for m, shard in enumerate(shards):
            n = len(shard)
            Q, _ = np.linalg.qr(base_dirs + spec.hessian_spread * gen.standard_normal((d, d)))
            root = (Q * sqrt_eig) @ Q.T  # symmetric square root
            Z = shard.X - shard.X.mean(axis=0)
            W, _ = np.linalg.qr(Z)
            X = np.sqrt(n) * W @ root  # X.T @ X / n == target Hessian - reg
            noise = spec.noise_std * gen.standard_normal(n)
            y = np.einsum("ij,ij->i", X, cluster_models[shard.groups]) + noise
            shaped.append(Dataset(X, y, shard.groups))
        return task_from_shards("quadratic", shaped, spec.reg)

    if spec.family == "logistic":
        shaped = []
        for shard in shards:
            X = shard.X + spec.heterogeneity * shifts[shard.groups] / np.sqrt(d)
            logits = np.einsum("ij,ij->i", X, cluster_models[shard.groups])
            logits += spec.noise_std * gen.standard_normal(len(shard))
            y = np.where(logits >= 0, 1.0, -1.0)
            shaped.append(Dataset(X, y, shard.groups))
        return task_from_shards("logistic", shaped, spec.reg)
    raise ValueError(f"unknown task family {spec.family!r}")


def task_from_dataset(
    dataset: Dataset, M: int, mode: str, rng: RngStream, family: str = "logistic", reg: float = 1e-2
) -> FederatedTask:
    """Federated task from user data; logistic labels may be {0,1} or {-1,+1}."""
    if family == "logistic":
        y = np.where(dataset.y > 0, 1.0, -1.0)
        dataset = Dataset(dataset.X, y, dataset.groups)
    shards = partition(dataset, M, mode, rng.child(StreamLabel.PARTITION, 0))
    return task_from_shards(family, shards, reg)


def load_delimited(path: str | Path, delimiter: str | None = None) -> Dataset:
    """One sample per row, last column is the label/target.  Delimiter sniffed as comma or whitespace."""
    path = Path(path)
    if delimiter is None:
        with path.open() as fh:
            first = next((ln for ln in fh if ln.strip() and not ln.startswith("#")), "")
        delimiter = "," if "," in first else None
    data = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    X, y = data[:, :-1], data[:, -1]
    return Dataset(X, y, y.astype(np.int64) if np.all(y == np.round(y)) else np.zeros(len(y), int))


# -- training steps ---------------------------------------------------------------


def local_sgd(
    theta, task: FederatedTask, device: int, tau: int, eta_t: float, batch_size: int, rng: RngStream
) -> LocalUpdate:
    """``tau`` mini-batch SGD steps from ``theta``; returns the accumulated model change.

    Each step draws a fresh mini-batch uniformly without replacement within
    the batch (samples can recur across steps).  ``batch_size == B_m`` uses
    the full local dataset deterministically.
    """
    if not eta_t > 0 or tau < 1:
        raise ValueError("need eta_t > 0 and tau >= 1")
    shard = task.shards[device]
    n = len(shard)
    if batch_size > n or batch_size < 1:
        raise ValueError(f"batch_size={batch_size} not in [1, B_m={n}] for device {device}")
    theta0 = as_model_vector(theta, task.d)
    current = theta0.copy()
    gen = rng.generator() if batch_size < n else None
    sq = np.empty(tau)
    for step in range(tau):
        if gen is None:
            X, y = shard.X, shard.y
        else:
            idx = gen.choice(n, size=batch_size, replace=False)
            X, y = shard.X[idx], shard.y[idx]
        _, g = _device_loss_grad(task.family, task.reg, X, y, current)
        sq[step] = g @ g
        current = current - eta_t * g
    return LocalUpdate(current - theta0, device, float(sq.max()), float(sq.mean()))


def aggregate_error_free(updates: Sequence[LocalUpdate | np.ndarray], M: int) -> np.ndarray:
    if len(updates) != M:
        raise ValueError(f"expected {M} updates, got {len(updates)}")
    deltas = [u.delta if isinstance(u, LocalUpdate) else np.asarray(u, float) for u in updates]
    return np.mean(np.stack(deltas), axis=0)


def global_step(theta, estimate) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if theta.shape != estimate.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {estimate.shape}")
    return theta + estimate
