"""Per-step score arithmetic: CFG, negative prompts and safe latent diffusion.

Every combination is written as ``(1 - a) * e_base + a * e_cond`` so that the
reductions (a = 1, a = 0, a null negative, zero safety term) hold bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .conditioning import NULL_TOKEN, TokenEmbeddingTable, encode_prompt
from .denoiser import predict_noise


class SldParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    s_S: float = Field(5000.0, ge=0)
    lambda_safe: float = Field(1.0, ge=0)
    s_m: float = Field(0.5, ge=0, le=1)
    zeta_m: float = Field(0.7, ge=0, lt=1)
    delta: int = Field(0, ge=0)


# max is the published SLD-Max setting. medium/strong borrow the thresholds and
# momentum of the original SLD ladder with warm-ups shortened for 100-step sampling.
SLD_VARIANTS: dict[str, SldParams] = {
    "weak": SldParams(s_S=200.0, lambda_safe=1.0, s_m=0.0, zeta_m=0.0, delta=10),
    "medium": SldParams(s_S=1000.0, lambda_safe=0.01, s_m=0.3, zeta_m=0.4, delta=6),
    "strong": SldParams(s_S=2000.0, lambda_safe=0.025, s_m=0.5, zeta_m=0.7, delta=3),
    "max": SldParams(s_S=5000.0, lambda_safe=1.0, s_m=0.5, zeta_m=0.7, delta=0),
}


def sld_variant(name: str) -> SldParams:
    try:
        return SLD_VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown SLD variant {name!r}; choose from {sorted(SLD_VARIANTS)}") from None


class GuidanceSpec(BaseModel):
    """Declarative guidance. ``negative_prompt`` is the NP negative / SLD safety concept."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["none", "cfg", "negative_prompt", "sld"] = "cfg"
    alpha: float = 3.0
    mu: float = 3.0
    negative_prompt: list[str] | None = None
    sld: SldParams | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "negative_prompt" and not self.negative_prompt:
            raise ValueError("negative_prompt mode needs negative_prompt")
        if self.mode == "sld" and (self.sld is None or not self.negative_prompt):
            raise ValueError("sld mode needs sld parameters and a safety concept (negative_prompt)")
        return self


@dataclass
class SldState:
    """Trajectory-local momentum. Never share one across trajectories."""

    momentum: torch.Tensor | None = None
    steps_taken: int = 0
    history: list = field(default_factory=list)


def combine(e_base: torch.Tensor, e_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """``e_base + scale * (e_cond - e_base)``."""
    return (1 - scale) * e_base + scale * e_cond


def cfg_noise(model, x_t, c, t, alpha: float, sched=None) -> torch.Tensor:
    e_u = predict_noise(model, x_t, model.null_condition, t, sched)
    e_c = predict_noise(model, x_t, c, t, sched)
    return combine(e_u, e_c, alpha)


def np_noise(model, x_t, c, t, alpha: float, neg_condition, sched=None) -> torch.Tensor:
    if neg_condition is None:
        raise ValueError("negative prompt guidance needs a negative condition")
    e_n = predict_noise(model, x_t, neg_condition, t, sched)
    e_c = predict_noise(model, x_t, c, t, sched)
    return combine(e_n, e_c, alpha)


def sld_beta(eps_c: torch.Tensor, eps_n: torch.Tensor, s_S: float, lambda_safe: float) -> torch.Tensor:
    """Element-wise safety scale: ``max(1, |s_S (eps_c - eps_n)|)`` where ``|eps_c - eps_n| <= lambda_safe``, else 0."""
    if eps_c.shape != eps_n.shape:
        raise ValueError(f"shape mismatch {tuple(eps_c.shape)} vs {tuple(eps_n.shape)}")
    diff = eps_c - eps_n
    scaled = torch.clamp((s_S * diff).abs(), min=1.0)
    return torch.where(diff.abs() <= lambda_safe, scaled, torch.zeros_like(scaled))


def sld_step(e_u, e_c, e_s, mu: float, params: SldParams, state: SldState, keep_history: bool = False):
    """One safety-guided combination given the three predictions.

    Returns the guided noise and the safety term gamma; ``state`` is advanced
    in place (momentum is stored detached).
    """
    if state.momentum is None:
        state.momentum = torch.zeros_like(e_c.detach())
    if state.steps_taken < params.delta:
        gamma = torch.zeros_like(e_c)
    else:
        beta = sld_beta(e_c, e_s, params.s_S, params.lambda_safe)
        gamma = beta * (e_c - e_u) + params.s_m * state.momentum
    state.momentum = params.zeta_m * state.momentum + (1 - params.zeta_m) * gamma.detach()
    state.steps_taken += 1
    if keep_history:
        state.history.append(gamma.detach())
    return combine(e_u, e_c, mu) - mu * gamma, gamma


def sld_noise(model, x_t, c, t, spec: GuidanceSpec, state: SldState, safety_condition=None, sched=None):
    if spec.mode != "sld" or spec.sld is None:
        raise ValueError("sld_noise needs an sld guidance spec")
    if safety_condition is None:
        safety_condition = encode_prompt(spec.negative_prompt, model.table)
    e_u = predict_noise(model, x_t, model.null_condition, t, sched)
    e_c = predict_noise(model, x_t, c, t, sched)
    e_s = predict_noise(model, x_t, safety_condition, t, sched)
    out, _ = sld_step(e_u, e_c, e_s, spec.mu, spec.sld, state)
    return out, state


def guided_noise(model, x_t, c, t, spec: GuidanceSpec, state: SldState | None = None, sched=None,
                 table: TokenEmbeddingTable | None = None):
    """Dispatch on ``spec.mode``; ``table`` resolves negative prompts (defaults to the model's)."""
    table = table or model.table
    if spec.mode == "none":
        return predict_noise(model, x_t, c, t, sched)
    if spec.mode == "cfg":
        return cfg_noise(model, x_t, c, t, spec.alpha, sched)
    neg = encode_prompt(spec.negative_prompt, table)
    if spec.mode == "negative_prompt":
        return np_noise(model, x_t, c, t, spec.alpha, neg, sched)
    if state is None:
        raise ValueError("sld guidance needs an SldState")
    out, _ = sld_noise(model, x_t, c, t, spec, state, neg, sched)
    return out


def null_guidance_spec(alpha: float) -> GuidanceSpec:
    """Negative-prompt spec whose negative is the null token (equivalent to CFG)."""
    return GuidanceSpec(mode="negative_prompt", alpha=alpha, negative_prompt=[NULL_TOKEN])
