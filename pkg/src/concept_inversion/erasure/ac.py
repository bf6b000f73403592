"""Concept ablation: overwrite the target concept with an anchor concept."""
from __future__ import annotations

from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..conditioning import NULL_TOKEN, encode_prompt, prompt_for
from ..data import LabeledImages
from ..diffusion import denoising_loss
from ..denoiser import predict_noise
from ..schedule import NoiseSchedule, forward_diffuse
from .common import CurveLog, enable, freeze, select_parameters, trainable_copy


class AcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Literal["model_based", "noise_based"] = "noise_based"
    anchor_token: str = "<digit-8>"
    target_token: str = "<digit-3>"
    w_t: Literal["constant"] | float = "constant"
    regularize_anchor: bool = True
    params_scope: Literal["cross_attention", "embedding", "full"] = "cross_attention"
    steps: int = Field(400, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.anchor_token == self.target_token:
            raise ValueError("anchor token must differ from the target token")
        return self

    def weight(self, t: torch.Tensor) -> torch.Tensor:
        value = 1.0 if self.w_t == "constant" else float(self.w_t)
        return torch.full(t.shape, value)


def model_based_loss(model, x_t, t, target_cond, anchor_cond, w) -> torch.Tensor:
    """``w_t * ||sg(eps(x_t, anchor)) - eps(x_t, target)||^2`` on anchor-image states."""
    with torch.no_grad():
        anchor_pred = predict_noise(model, x_t, anchor_cond, t)
    target_pred = predict_noise(model, x_t, target_cond, t)
    per = ((anchor_pred - target_pred) ** 2).flatten(1).mean(1)
    return (w.to(per.dtype) * per).mean()


def erase_ac(model, cfg: AcConfig, anchor_images: LabeledImages, sched: NoiseSchedule, log: CurveLog | None = None):
    if len(anchor_images) == 0:
        raise ValueError("anchor image set is empty")
    student = trainable_copy(model)
    table = student.table
    for tok in (cfg.anchor_token, cfg.target_token):
        if tok not in table:
            raise KeyError(f"unknown token {tok!r}")
    if cfg.params_scope == "embedding":
        rows = [t for t in table.tokens if t != NULL_TOKEN and not table.is_placeholder(t)]
        for tok in rows:
            table.frozen.discard(tok)
            table.entries[tok] = table.entries[tok].detach().clone().requires_grad_(True)
        params = [table.entries[t] for t in rows]
    else:
        params = enable(select_parameters(student, cfg.params_scope))
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    log = log or CurveLog()
    for step in range(cfg.steps):
        target_cond = encode_prompt(prompt_for(cfg.target_token), table)
        anchor_cond = encode_prompt(prompt_for(cfg.anchor_token), table)
        B = cfg.batch_size
        idx = torch.randint(0, len(anchor_images), (B,), generator=g)
        x0 = anchor_images.images[idx]
        t = torch.randint(1, sched.T + 1, (B,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        w = cfg.weight(t)
        if cfg.variant == "model_based":
            x_t = forward_diffuse(x0, t, eps, sched)
            loss = model_based_loss(student, x_t, t, target_cond, anchor_cond, w)
        else:
            x_t = forward_diffuse(x0, t, eps, sched)
            per = ((predict_noise(student, x_t, target_cond, t) - eps) ** 2).flatten(1).mean(1)
            loss = (w * per).mean()
            if cfg.regularize_anchor:
                loss = loss + denoising_loss(student, x0, anchor_cond.expand(B, -1, -1), t,
                                             torch.randn(x0.shape, generator=g), sched)
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            opt.step()
        log(step=step, loss=loss.item())
    if cfg.params_scope == "embedding":
        for tok in list(table.entries):
            if not table.is_placeholder(tok):
                table.entries[tok] = table.entries[tok].detach()
                table.frozen.add(tok)
    return freeze(student)
