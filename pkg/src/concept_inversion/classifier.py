"""Judge classifier used to score generated samples."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .data import LabeledImages


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(12, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    max_shift: int = Field(2, ge=0)
    seed: int = 0
    min_accuracy: float = 0.97


class DigitClassifier(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Dropout(0.25), nn.Linear(64 * 7 * 7, 128), nn.ReLU(),
                                  nn.Dropout(0.25), nn.Linear(128, num_classes))

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        self.eval()
        out = [self(images[i:i + batch_size].float()).argmax(1) for i in range(0, len(images), batch_size)]
        return torch.cat(out)


def _shift(x: torch.Tensor, max_shift: int, g: torch.Generator) -> torch.Tensor:
    if max_shift == 0:
        return x
    pad = F.pad(x, (max_shift,) * 4, value=-1.0)
    out = torch.empty_like(x)
    offs = torch.randint(0, 2 * max_shift + 1, (len(x), 2), generator=g)
    H, W = x.shape[-2:]
    for i, (dy, dx) in enumerate(offs.tolist()):
        out[i] = pad[i, :, dy:dy + H, dx:dx + W]
    return out


def accuracy(clf: DigitClassifier, data: LabeledImages) -> float:
    return (clf.predict(data.images) == data.labels).float().mean().item()


def train_classifier(train: LabeledImages, test: LabeledImages, cfg: ClassifierConfig = ClassifierConfig(),
                     enforce_gate: bool = True) -> tuple[DigitClassifier, float]:
    """Train the judge; returns ``(classifier, held-out accuracy)``.

    Raises when fewer than two classes are present, or (with
    ``enforce_gate``) when held-out accuracy is below ``cfg.min_accuracy``.
    """
    classes = train.classes
    if len(classes) < 2:
        raise ValueError("classifier needs at least two classes")
    torch.manual_seed(cfg.seed)
    clf = DigitClassifier(max(classes) + 1)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    for _ in range(cfg.epochs):
        clf.train()
        order = torch.randperm(len(train), generator=g)
        for s in range(0, len(train), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = _shift(train.images[idx], cfg.max_shift, g)
            loss = F.cross_entropy(clf(x), train.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    acc = accuracy(clf, test)
    if enforce_gate and acc < cfg.min_accuracy:
        raise RuntimeError(f"judge classifier held-out accuracy {acc:.4f} below gate {cfg.min_accuracy}")
    return clf, acc
