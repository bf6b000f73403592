"""MNIST-class data: the 5,000-image subset bundled with mlxtend.

Images are scaled to [-1, 1] and shaped ``(N, 1, 28, 28)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class LabeledImages:
    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def subset(self, idx) -> "LabeledImages":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledImages(self.images[idx], self.labels[idx])

    def of_class(self, label: int) -> "LabeledImages":
        return self.subset(torch.nonzero(self.labels == label).flatten())

    def without_class(self, label: int) -> "LabeledImages":
        return self.subset(torch.nonzero(self.labels != label).flatten())

    def only_classes(self, labels) -> "LabeledImages":
        keep = torch.isin(self.labels, torch.as_tensor(list(labels)))
        return self.subset(torch.nonzero(keep).flatten())


@dataclass
class Splits:
    """Per-class disjoint splits.

    ``train`` feeds the denoiser, ``attack`` is the held-out pool the adversary
    draws example images from, ``test`` scores the judge classifier.
    """

    train: LabeledImages
    attack: LabeledImages
    test: LabeledImages

    @property
    def classifier_train(self) -> LabeledImages:
        return LabeledImages(torch.cat([self.train.images, self.attack.images]),
                             torch.cat([self.train.labels, self.attack.labels]))


def load_mnist() -> LabeledImages:
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    images = torch.from_numpy((X.astype(np.float32) / 127.5 - 1.0).reshape(-1, 1, 28, 28))
    return LabeledImages(images, torch.from_numpy(y.astype(np.int64)))


def make_splits(data: LabeledImages, n_attack: int = 50, n_test: int = 50, seed: int = 0,
                classes=None, max_train: int | None = None) -> Splits:
    """Seeded per-class split; ``max_train`` caps the training images per class."""
    rng = np.random.default_rng(seed)
    parts = {"train": [], "attack": [], "test": []}
    for label in classes if classes is not None else data.classes:
        idx = np.flatnonzero(data.labels.numpy() == label)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) <= n_attack + n_test:
            raise ValueError(f"class {label} has only {len(idx)} images")
        parts["test"].append(idx[:n_test])
        parts["attack"].append(idx[n_test:n_test + n_attack])
        parts["train"].append(idx[n_test + n_attack:][:max_train])
    return Splits(**{k: data.subset(np.sort(np.concatenate(v))) for k, v in parts.items()})
