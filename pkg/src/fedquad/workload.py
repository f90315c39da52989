"""Synthetic classification workload and non-IID partitioning.

The task is Gaussian class clusters on well-separated unit-sphere centers
(pairwise distance >= a floor, enforced by rejection), with optional uniform
label noise that flips a label to one of the *other* classes. A symmetric
Dirichlet over class proportions splits the training set across devices,
producing realistic heterogeneity at small alpha and near-uniform splits at
large alpha.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from fedquad.rng import RngStream


@dataclass
class Dataset:
    x: np.ndarray  # (n, dim) float64
    y: np.ndarray  # (n,) int labels
    classes: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and labels disagree")
        if self.x.shape[0] > 0 and not (0 <= int(self.y.min()) <= int(self.y.max()) < self.classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class PartitionPlan:
    """Index lists per device over one Dataset."""

    indices: list[list[int]]

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.indices]


def _unit_vector(rng: RngStream, dim: int) -> np.ndarray:
    while True:
        v = np.array([rng.normal() for _ in range(dim)], dtype=np.float64)
        norm = float(np.sqrt(np.sum(v * v)))
        if norm > 1e-9:
            return v / norm


def _spaced_centers(rng: RngStream, classes: int, dim: int, min_dist: float) -> np.ndarray:
    """Unit-sphere centers with pairwise distance >= min_dist, by rejection."""
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < classes:
        cand = _unit_vector(rng, dim)
        if all(float(np.linalg.norm(cand - c)) >= min_dist for c in centers):
            centers.append(cand)
            attempts = 0
        else:
            attempts += 1
            if attempts > 10_000:
                raise RuntimeError(
                    f"cannot place {classes} centers at min distance {min_dist}"
                )
    return np.stack(centers)


def generate_task(
    rng: RngStream,
    n_samples: int,
    dim: int,
    classes: int,
    sigma: float = 0.3,
    noise: float = 0.0,
    min_center_distance: float = 1.2,
) -> Dataset:
    """Draw a cluster dataset; label noise flips to a different class."""
    if classes < 2 or n_samples < 1 or dim < 2:
        raise ValueError("bad task dimensions")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be a probability")
    centers = _spaced_centers(rng, classes, dim, min_center_distance)
    xs = np.empty((n_samples, dim), dtype=np.float64)
    ys = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        cls = rng.randint(classes)
        noise_vec = np.array([rng.normal() for _ in range(dim)], dtype=np.float64)
        xs[i] = centers[cls] + sigma * noise_vec
        if noise > 0.0 and rng.uniform() < noise:
            cls = (cls + 1 + rng.randint(classes - 1)) % classes
        ys[i] = cls
    return Dataset(x=xs, y=ys, classes=classes)


def dirichlet_partition(
    rng: RngStream, dataset: Dataset, n_devices: int, alpha: float
) -> PartitionPlan:
    """Split sample indices across devices by per-class Dirichlet proportions.

    Every sample lands on exactly one device; empty shards are repaired by
    stealing one sample from the largest shard so each device can train.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    shards: list[list[int]] = [[] for _ in range(n_devices)]
    for cls in range(dataset.classes):
        cls_idx = [int(i) for i in np.flatnonzero(dataset.y == cls)]
        order = rng.permutation(len(cls_idx))
        cls_idx = [cls_idx[j] for j in order]
        props = rng.dirichlet(alpha, n_devices)
        # cumulative proportional cut points over this class's samples
        bounds = [0] * (n_devices + 1)
        acc = 0.0
        for dev in range(n_devices):
            acc += props[dev]
            bounds[dev + 1] = min(len(cls_idx), int(round(acc * len(cls_idx))))
        bounds[n_devices] = len(cls_idx)
        for dev in range(n_devices):
            shards[dev].extend(cls_idx[bounds[dev] : bounds[dev + 1]])
    for shard in shards:
        shard.sort()
    for dev in range(n_devices):
        if not shards[dev]:
            donor = max(range(n_devices), key=lambda j: len(shards[j]))
            if len(shards[donor]) <= 1:
                raise ValueError("not enough samples to cover every device")
            shards[dev].append(shards[donor].pop())
            shards[dev].sort()
    return PartitionPlan(indices=shards)


def take(dataset: Dataset, indices: list[int]) -> Dataset:
    return Dataset(
        x=dataset.x[indices], y=dataset.y[indices], classes=dataset.classes
    )


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Persist as CSV: x0..x{dim-1} columns plus a trailing label column."""
    dim = dataset.x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path, classes: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("expected a trailing 'label' column")
        xs, ys = [], []
        for row in reader:
            xs.append([float(v) for v in row[:-1]])
            ys.append(int(row[-1]))
    x = np.array(xs, dtype=np.float64)
    y = np.array(ys, dtype=np.int64)
    n_classes = classes if classes is not None else (int(y.max()) + 1 if len(ys) else 0)
    return Dataset(x=x, y=y, classes=n_classes)
