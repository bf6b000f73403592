"""Attention re-steering: drive cross-attention mass on the forget tokens to zero."""
from __future__ import annotations

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..conditioning import encode_prompt
from ..data import LabeledImages
from ..denoiser import predict_noise
from ..schedule import NoiseSchedule, forward_diffuse
from .common import CurveLog, enable, freeze, select_parameters, trainable_copy


class FmnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    forget_tokens: list[str] = ["<digit-3>"]
    prompt_template: list[str] = ["a", "photo", "of", "<digit-3>"]
    params_scope: str = "cross_attention"
    steps: int = Field(200, ge=1)
    lr: float = Field(3e-4, gt=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        missing = [t for t in self.forget_tokens if t not in self.prompt_template]
        if missing:
            raise ValueError(f"forget tokens {missing} absent from prompt template")
        return self

    @property
    def positions(self) -> list[int]:
        return [i for i, t in enumerate(self.prompt_template) if t in self.forget_tokens]


def attention_resteer_loss(maps, positions) -> torch.Tensor:
    """Sum over maps of squared attention at ``positions``, averaged over the batch.

    Each map is ``(B, heads, queries, tokens)`` (or any ``(..., tokens)``
    with a leading batch axis).
    """
    total = 0.0
    for a in maps:
        sel = a[..., positions]
        batch = a.shape[0] if a.ndim > 2 else 1
        total = total + (sel ** 2).sum() / batch
    return total


def erase_fmn(model, cfg: FmnConfig, reference: LabeledImages, sched: NoiseSchedule, log: CurveLog | None = None):
    if len(reference) == 0:
        raise ValueError("reference image set is empty")
    student = trainable_copy(model)
    params = enable(select_parameters(student, cfg.params_scope))
    cond = encode_prompt(cfg.prompt_template, student.table)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    log = log or CurveLog()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(reference), (cfg.batch_size,), generator=g)
        x0 = reference.images[idx]
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=g)
        x_t = forward_diffuse(x0, t, torch.randn(x0.shape, generator=g), sched)
        _, maps = predict_noise(student, x_t, cond, t, return_attn=True)
        loss = attention_resteer_loss(maps, cfg.positions)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log(step=step, loss=loss.item())
    return freeze(student)


@torch.no_grad()
def attention_mass(model, x_t, cond, t, positions) -> float:
    """Mean attention probability on ``positions`` over all maps, heads and queries."""
    _, maps = predict_noise(model, x_t, cond, t, return_attn=True)
    return torch.stack([a[..., positions].sum(-1).mean() for a in maps]).mean().item()
