"""Synthetic classification data for the desk-scale unlearning experiments."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Gaussian-cluster classification data with fixed splits.

    ``forget_idx`` and ``retain_idx`` partition the train indices; a freshly
    generated dataset has an empty forget set.
    """

    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    train_idx: np.ndarray = field(repr=False)
    val_idx: np.ndarray = field(repr=False)
    test_idx: np.ndarray = field(repr=False)
    forget_idx: np.ndarray = field(repr=False)
    retain_idx: np.ndarray = field(repr=False)
    n_classes: int = 0

    def subset(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.features[idx], self.labels[idx]


def _place_centers(rng: np.random.Generator, n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Rejection-sample cluster centers with pairwise distance >= separation.

    The sampling radius is chosen so typical center distances land near the
    requested separation (rejection enforces the minimum), keeping the task
    difficulty controlled by ``separation`` alone.  Requests that cannot pack
    into that radius (many classes in a low dimension) fail deterministically.
    """
    radius = max(1.25 * separation / np.sqrt(2.0 * dim), 1.0)
    centers: list[np.ndarray] = []
    attempts = 0
    budget = 500 * n_classes
    while len(centers) < n_classes:
        if attempts >= budget:
            raise ValueError(
                f"cannot place {n_classes} centers at pairwise distance {separation} "
                f"in dimension {dim}"
            )
        cand = rng.normal(0.0, radius, size=dim)
        attempts += 1
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
    return np.stack(centers)


def gen_dataset(n_classes: int, dim: int, samples_per_class: int, separation: float,
                seed: int) -> Dataset:
    """Deterministic Gaussian clusters with an 80/10/10 train/val/test split."""
    if min(n_classes, dim, samples_per_class) <= 0:
        raise ValueError("n_classes, dim, and samples_per_class must be positive")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    centers = _place_centers(rng, n_classes, dim, separation)
    n = n_classes * samples_per_class
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    features = centers[labels] + rng.normal(0.0, 1.0, size=(n, dim))

    perm = rng.permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train : n_train + n_val])
    test_idx = np.sort(perm[n_train + n_val :])
    return Dataset(
        features=features,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
        forget_idx=np.zeros(0, dtype=train_idx.dtype),
        retain_idx=train_idx.copy(),
        n_classes=n_classes,
    )


def split_forget(ds: Dataset, mode: str, seed: int, fraction: float | None = None,
                 class_id: int | None = None) -> Dataset:
    """Partition the train indices into forget/retain.

    ``mode`` is ``random_fraction`` (needs ``fraction`` in (0,1)) or
    ``class_wise`` (needs ``class_id``).
    """
    train = ds.train_idx
    if mode == "random_fraction":
        if fraction is None or not (0.0 < fraction < 1.0):
            raise ValueError(f"random_fraction needs a fraction in (0,1), got {fraction}")
        k = int(round(fraction * train.size))
        rng = np.random.default_rng(seed)
        forget = np.sort(rng.permutation(train)[:k])
    elif mode == "class_wise":
        if class_id is None or not (0 <= class_id < ds.n_classes):
            raise ValueError(f"class_wise needs a valid class id, got {class_id}")
        forget = train[ds.labels[train] == class_id]
    else:
        raise ValueError(f"unknown forget mode {mode!r}")
    retain = np.setdiff1d(train, forget)
    if forget.size == 0 or retain.size == 0:
        raise ValueError("forget split left an empty forget or retain partition")
    return replace(ds, forget_idx=forget, retain_idx=retain)
