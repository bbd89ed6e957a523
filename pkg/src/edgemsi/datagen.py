"""Synthetic data, device partitions, and partial sample exchange."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from ._random import as_rng


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    label_count: int
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.label_count):
            raise ValueError(f"labels must lie in [0, {self.label_count})")
        if len(self) < self.label_count:
            warnings.warn(f"dataset has {len(self)} samples for {self.label_count} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.label_count)


@dataclass
class PartitionPlan:
    assignments: list[np.ndarray]
    coverage_warning: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def n_devices(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def validate(self, ds: Dataset, disjoint: bool = False) -> None:
        seen = set()
        for a in self.assignments:
            if a.size and (a.min() < 0 or a.max() >= len(ds)):
                raise ValueError("partition index out of range")
            if disjoint:
                s = set(a.tolist())
                if seen & s:
                    raise ValueError("partition is not disjoint")
                seen |= s


def _lattice_centers(L: int, d: int, separation: float, rng) -> np.ndarray:
    side = int(np.ceil(L ** (1.0 / d) - 1e-9))
    while side**d < L:
        side += 1
    if side**d <= 200_000:
        points = np.array(list(product(range(side), repeat=d)), dtype=np.float64)
        pick = rng.choice(len(points), size=L, replace=False)
        chosen = points[pick]
    else:
        chosen = np.zeros((0, d))
        seen = set()
        while len(chosen) < L:
            p = tuple(rng.integers(0, side, size=d))
            if p not in seen:
                seen.add(p)
                chosen = np.vstack([chosen, p])
    centers = chosen * separation
    return centers - centers.mean(axis=0)


def gen_blobs(L: int, per_class: int, d: int, separation: float, seed=0) -> Dataset:
    """Unit-covariance Gaussian clusters on a lattice of spacing ``separation``.

    Lattice placement guarantees every pair of centers is at least
    ``separation`` apart. Samples are ordered by label.
    """
    if L < 2 or per_class < 1 or d < 1 or not separation > 0:
        raise ValueError("need L >= 2, per_class >= 1, d >= 1, separation > 0")
    rng = as_rng(seed)
    centers = _lattice_centers(L, d, separation, rng)
    labels = np.repeat(np.arange(L), per_class)
    inputs = centers[labels] + rng.standard_normal((L * per_class, d))
    return Dataset(inputs, labels, L, centers)


def split_per_class(ds: Dataset, n_test_per_class: int, seed=0) -> tuple[Dataset, Dataset]:
    """Hold out ``n_test_per_class`` random samples of every label."""
    rng = as_rng(seed)
    test = []
    for label in range(ds.label_count):
        idx = np.flatnonzero(ds.labels == label)
        take = min(n_test_per_class, len(idx))
        test.extend(rng.choice(idx, size=take, replace=False).tolist())
    mask = np.zeros(len(ds), dtype=bool)
    mask[test] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def split_fraction(ds: Dataset, test_fraction: float, seed=0) -> tuple[Dataset, Dataset]:
    rng = as_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def load_csv(path, label_count: int | None = None) -> Dataset:
    """Rows of ``d`` feature columns followed by one integer label.

    A header row is detected by a non-numeric first field.
    """
    rows = []
    with open(Path(path), newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}: non-numeric value on line {i + 1}") from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature and one label column")
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: label column must hold integers")
    labels = labels.astype(np.int64)
    if label_count is None:
        label_count = int(labels.max()) + 1
    return Dataset(arr[:, :-1], labels, label_count)


def partition_iid(ds: Dataset, M: int, seed=0) -> PartitionPlan:
    """Random disjoint shards whose sizes differ by at most one."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples over {M} devices")
    rng = as_rng(seed)
    perm = rng.permutation(len(ds))
    return PartitionPlan([np.sort(s) for s in np.array_split(perm, M)])


def partition_label_skew(ds: Dataset, M: int, labels_per_device: int, seed=0) -> PartitionPlan:
    """Give each device only samples from ``labels_per_device`` labels.

    Label subsets cycle through ``0..L-1`` so consecutive devices pick up
    consecutive labels; each label's samples are split evenly among the devices
    holding it.
    """
    L = ds.label_count
    if not 1 <= labels_per_device <= L:
        raise ValueError(f"labels_per_device must be in [1, {L}]")
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = as_rng(seed)
    label_sets = [[(i * labels_per_device + j) % L for j in range(labels_per_device)] for i in range(M)]
    holders = {label: [i for i, s in enumerate(label_sets) if label in s] for label in range(L)}
    parts: list[list[int]] = [[] for _ in range(M)]
    for label in range(L):
        idx = rng.permutation(np.flatnonzero(ds.labels == label))
        owners = holders[label]
        if not owners:
            continue
        for owner, chunk in zip(owners, np.array_split(idx, len(owners))):
            parts[owner].extend(chunk.tolist())
    plan = PartitionPlan([np.sort(np.asarray(p, dtype=np.int64)) for p in parts])
    if M * labels_per_device < L:
        plan.coverage_warning = True
        plan.notes.append(f"{M} devices x {labels_per_device} labels cannot cover {L} labels")
    return plan


def share_fraction(ds: Dataset, plan: PartitionPlan, p: float, seed=0) -> PartitionPlan:
    """Copy a random ``floor(p * n_j)`` samples of every peer ``j`` to each device.

    Draws are nested: each (receiver, sender) pair uses a fixed permutation of
    the sender's shard and takes its prefix, so a larger ``p`` under the same
    seed yields a superset.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    plan.validate(ds)
    rng = as_rng(seed)
    M = plan.n_devices
    perms = [[rng.permutation(plan.assignments[j]) for j in range(M)] for _ in range(M)]
    out = []
    for i in range(M):
        extra = []
        for j in range(M):
            if j == i:
                continue
            k = int(np.floor(p * len(plan.assignments[j]) + 1e-9))
            extra.append(perms[i][j][:k])
        out.append(np.concatenate([plan.assignments[i]] + extra).astype(np.int64))
    return PartitionPlan(out, plan.coverage_warning, list(plan.notes))
