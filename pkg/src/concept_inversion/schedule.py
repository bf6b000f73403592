"""Variance schedules and the closed-form forward noising step."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``betas`` and cumulative products ``alpha_bars``.

    Steps are 1-indexed: step ``t`` uses ``betas[t - 1]``.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def check_step(self, t) -> None:
        t = torch.as_tensor(t)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise ValueError(f"step index out of range [1, {self.T}]: {t.tolist()}")

    def alpha_bar(self, t) -> torch.Tensor:
        self.check_step(t)
        return torch.as_tensor(self.alpha_bars)[torch.as_tensor(t) - 1]

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d["kind"], d["beta_min"], d["beta_max"])


def _cosine_betas(T: int, beta_min: float, beta_max: float, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    betas = 1.0 - f[1:] / f[:-1]
    return np.clip(betas, beta_min, beta_max)


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T, beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(int(T), betas, alpha_bars, kind, float(beta_min), float(beta_max))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` is a scalar or one step per batch row."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = sched.alpha_bar(t).to(x0.dtype)
    if abar.ndim == 1:
        if abar.shape[0] != x0.shape[0]:
            raise ValueError("one step index per batch element required")
        abar = abar.view(-1, *([1] * (x0.ndim - 1)))
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps
