"""Selective forgetting: surrogate-likelihood fine-tuning with an EWC anchor and replay."""
from __future__ import annotations

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..conditioning import class_token, encode_prompt, prompt_for
from ..data import LabeledImages
from ..diffusion import denoising_loss
from ..schedule import NoiseSchedule
from .common import CurveLog, enable, freeze, select_parameters, trainable_copy


class SaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    forget_token: str = "<digit-3>"
    surrogate_label: int = 8
    lambda_ewc: float = Field(100.0, ge=0)
    fisher_samples: int = Field(200, ge=0)
    replay: bool = True
    params_scope: str = "full"
    steps: int = Field(400, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.lambda_ewc > 0 and self.fisher_samples == 0:
            raise ValueError("lambda_ewc > 0 needs fisher_samples > 0")
        return self


def diagonal_fisher(model, params: list[tuple[str, torch.nn.Parameter]], loss_fn, n_samples: int) -> dict[str, torch.Tensor]:
    """Mean squared gradient of ``loss_fn(i)`` over ``i < n_samples``, per parameter."""
    if n_samples < 1:
        raise ValueError("fisher estimation needs at least one sample")
    fisher = {n: torch.zeros_like(p) for n, p in params}
    for i in range(n_samples):
        for _, p in params:
            p.grad = None
        loss_fn(i).backward()
        for n, p in params:
            if p.grad is not None:
                fisher[n] += p.grad.detach() ** 2 / n_samples
    for _, p in params:
        p.grad = None
    return fisher


def ewc_penalty(params, fisher, anchor) -> torch.Tensor:
    """``sum_i F_i / 2 * (theta_i - theta*_i)^2``."""
    total = 0.0
    for n, p in params:
        total = total + (fisher[n] / 2 * (p - anchor[n]) ** 2).sum()
    return total


def _batch(data: LabeledImages, size: int, g: torch.Generator):
    idx = torch.randint(0, len(data), (size,), generator=g)
    return data.images[idx], data.labels[idx]


def sa_objective(student, sched, surrogate_x, forget_cond, replay, lambda_ewc, params, fisher, anchor, g):
    """Surrogate denoising loss + lambda * EWC + replay denoising loss (terms drop when unused)."""
    B = surrogate_x.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=g)
    loss = denoising_loss(student, surrogate_x, forget_cond.expand(B, -1, -1), t,
                          torch.randn(surrogate_x.shape, generator=g), sched)
    if lambda_ewc > 0:
        loss = loss + lambda_ewc * ewc_penalty(params, fisher, anchor)
    if replay is not None:
        rx, rcond = replay
        tr = torch.randint(1, sched.T + 1, (rx.shape[0],), generator=g)
        loss = loss + denoising_loss(student, rx, rcond, tr, torch.randn(rx.shape, generator=g), sched)
    return loss


def erase_sa(model, cfg: SaConfig, surrogate: LabeledImages, remember: LabeledImages | None,
             sched: NoiseSchedule, log: CurveLog | None = None):
    """Fine-tune so the forget prompt models the surrogate images.

    ``remember`` supplies replay pairs (image, its class prompt) and the data
    for the Fisher estimate; pass ``None`` to drop replay.
    """
    if len(surrogate) == 0:
        raise ValueError("surrogate set is empty")
    if cfg.replay and (remember is None or len(remember) == 0):
        raise ValueError("replay requested but the remember set is empty")
    student = trainable_copy(model)
    params = select_parameters(student, cfg.params_scope)
    enable(params)
    table = student.table
    forget_cond = encode_prompt(prompt_for(cfg.forget_token), table)
    g = torch.Generator().manual_seed(cfg.seed)
    anchor = {n: p.detach().clone() for n, p in params}
    fisher = {}
    if cfg.lambda_ewc > 0:
        fisher_data = remember if remember is not None and len(remember) else surrogate

        def one(i):
            x = fisher_data.images[i % len(fisher_data)][None]
            label = int(fisher_data.labels[i % len(fisher_data)])
            cond = encode_prompt(prompt_for(class_token(label)), table)[None]
            t = torch.randint(1, sched.T + 1, (1,), generator=g)
            return denoising_loss(student, x, cond, t, torch.randn(x.shape, generator=g), sched)

        fisher = diagonal_fisher(student, params, one, cfg.fisher_samples)
    conds = {lab: encode_prompt(prompt_for(class_token(lab)), table) for lab in range(len(table))
             if class_token(lab) in table}
    opt = torch.optim.Adam([p for _, p in params], lr=cfg.lr)
    log = log or CurveLog()
    for step in range(cfg.steps):
        sx, _ = _batch(surrogate, cfg.batch_size, g)
        replay = None
        if cfg.replay:
            rx, rl = _batch(remember, cfg.batch_size, g)
            replay = (rx, torch.stack([conds[int(l)] for l in rl]))
        loss = sa_objective(student, sched, sx, forget_cond, replay, cfg.lambda_ewc, params, fisher, anchor, g)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log(step=step, loss=loss.item())
    return freeze(student)
