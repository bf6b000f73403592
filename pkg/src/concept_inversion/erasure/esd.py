"""Erasure by steering the conditional prediction against the concept."""
from __future__ import annotations

from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from ..denoiser import predict_noise
from ..diffusion import sample
from ..guidance import GuidanceSpec
from ..schedule import NoiseSchedule, forward_diffuse
from .common import CurveLog, concept_condition, enable, freeze, select_parameters, trainable_copy


class EsdConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eta: float = Field(1.0, ge=0)
    variant: Literal["x", "u"] = "u"
    steps: int = Field(400, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    pool_size: int = Field(64, ge=1)
    pool_alpha: float = 3.0
    seed: int = 0


def esd_target(e_uncond: torch.Tensor, e_cond: torch.Tensor, eta: float) -> torch.Tensor:
    """``e_u - eta * (e_c - e_u)`` from the frozen teacher."""
    return e_uncond - eta * (e_cond - e_uncond)


def erase_esd(model, concept_token: str, cfg: EsdConfig, sched: NoiseSchedule, log: CurveLog | None = None):
    """Fine-tune a copy so its conditional prediction for the concept matches the negated-guidance target.

    The method is data-free: states x_t are forward-noised versions of a small
    pool of the teacher's own guided samples of the concept.
    """
    cond = concept_condition(model, concept_token)
    teacher = model
    student = trainable_copy(model)
    params = enable(select_parameters(student, cfg.variant))
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    pool = sample(teacher, sched, GuidanceSpec(mode="cfg", alpha=cfg.pool_alpha), cond,
                  seed=cfg.seed + 1, n=cfg.pool_size)
    null = teacher.null_condition
    log = log or CurveLog()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(pool), (cfg.batch_size,), generator=g)
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=g)
        x_t = forward_diffuse(pool[idx], t, torch.randn(pool[idx].shape, generator=g), sched)
        with torch.no_grad():
            target = esd_target(predict_noise(teacher, x_t, null, t), predict_noise(teacher, x_t, cond, t), cfg.eta)
        loss = F.mse_loss(predict_noise(student, x_t, cond, t), target)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log(step=step, loss=loss.item())
    return freeze(student)
