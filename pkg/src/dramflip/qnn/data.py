"""Seeded synthetic classification datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("blobs", "rings", "tiny_images")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int
    kind: str = "blobs"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def random_guess(self) -> float:
        return 1.0 / self.num_classes

    def batch(self, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """A fixed random mini-batch (without replacement)."""
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(self), size=min(size, len(self)), replace=False))
        return self.inputs[idx], self.labels[idx]


def _balanced_labels(rng, samples: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(samples) % num_classes)


def _stratified_split(inputs, labels, num_classes, test_fraction, rng):
    test_idx = []
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        test_idx.extend(members[: int(round(len(members) * test_fraction))])
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    return (inputs[~test_mask], labels[~test_mask]), (inputs[test_mask], labels[test_mask])


def make_dataset(kind: str = "blobs", num_classes: int = 10, samples: int = 2000, seed: int = 0,
                 features: int | None = None, test_fraction: float = 0.25,
                 image_size: int = 8, noise: float | None = None) -> tuple[Dataset, Dataset]:
    """Return ``(train, test)`` for one of ``blobs``, ``rings`` or ``tiny_images``.

    Class sizes differ by at most one sample, in the full set and in each split.
    ``noise`` is the per-feature standard deviation around each class template
    (default 0.5 for blobs, 0.1 for rings, 1.0 for tiny images).
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if samples < 10 * num_classes:
        raise ValueError("need at least 10 samples per class")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, samples, num_classes)
    if kind == "blobs":
        features = features or 32
        centers = rng.normal(0.0, 1.0, size=(num_classes, features))
        inputs = centers[labels] + rng.normal(0.0, 0.5 if noise is None else noise, size=(samples, features))
    elif kind == "rings":
        features = features or 2
        radius = 1.0 + labels.astype(float)
        angle = rng.uniform(0.0, 2 * np.pi, samples)
        r = radius + rng.normal(0.0, 0.1 if noise is None else noise, samples)
        inputs = np.zeros((samples, max(features, 2)))
        inputs[:, 0] = r * np.cos(angle)
        inputs[:, 1] = r * np.sin(angle)
        if features > 2:
            inputs[:, 2:] = rng.normal(0.0, 0.1, size=(samples, features - 2))
    else:
        templates = rng.normal(0.0, 1.0, size=(num_classes, 1, image_size, image_size))
        inputs = templates[labels] + rng.normal(0.0, 1.0 if noise is None else noise,
                                                    size=(samples, 1, image_size, image_size))

    (xtr, ytr), (xte, yte) = _stratified_split(inputs, labels, num_classes, test_fraction, rng)
    return (Dataset(xtr, ytr, num_classes, seed, kind), Dataset(xte, yte, num_classes, seed, kind))
