"""Concept Inversion: learn a placeholder embedding against a frozen model.

Only the placeholder row is optimized. The model's parameters and every
other table row are never handed to an optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .conditioning import TokenEmbeddingTable, add_placeholder, encode_prompt, prompt_for
from .data import LabeledImages
from .denoiser import predict_noise
from .erasure.common import CurveLog
from .guidance import GuidanceSpec, SldParams, SldState, combine, sld_step
from .schedule import NoiseSchedule, forward_diffuse


class InversionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    attack: Literal["ti", "np_ci", "sld_ci"] = "ti"
    steps: int = Field(1000, ge=1)
    lr: float = Field(5e-3, gt=0)
    batch: int = Field(4, ge=1)
    placeholder: str = "<*0>"
    init: str = "random"
    n_examples: int = Field(30, ge=1)
    alpha: float | None = 3.0
    # sld_ci window: each outer step walks t = m', m'+k, ... <= n' inside [m, n]
    m: int = Field(1, ge=1)
    n: int = Field(100, ge=1)
    k: int = Field(1, ge=1)
    span: int | None = Field(None, ge=0)
    memory_cap: int | None = Field(None, ge=1)
    probe_size: int = Field(64, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.m > self.n:
            raise ValueError(f"sld_ci window needs m <= n, got m={self.m}, n={self.n}")
        if self.span is not None and self.span > self.n - self.m:
            raise ValueError("span exceeds the [m, n] window")
        return self

    def cap(self) -> int:
        return self.memory_cap or math.ceil((self.n - self.m) / self.k) + 1


@dataclass
class InversionResult:
    embedding: torch.Tensor
    token: str
    attack: str
    loss_curve: list[float]
    config: dict
    source: str = ""
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    peak_history: int = 0
    extra: dict = field(default_factory=dict)


def _placeholder_table(model, cfg: InversionConfig, table: TokenEmbeddingTable | None):
    base = table if table is not None else model.table
    private = base.copy()
    for tok in list(private.trainable):
        if private.is_placeholder(tok):
            del private.entries[tok]
    add_placeholder(private, cfg.placeholder, cfg.init, seed=cfg.seed)
    return private


def _check_frozen(model):
    if any(p.requires_grad for p in model.parameters()):
        raise ValueError("model must be frozen (no parameter requires grad)")


def ti_loss(model, x0, t, eps, placeholder_cond, sched) -> torch.Tensor:
    """``||eps - eps(x_t, c_*, t)||^2`` (mean over elements)."""
    x_t = forward_diffuse(x0, t, eps, sched)
    return F.mse_loss(predict_noise(model, x_t, placeholder_cond, t), eps)


def np_ci_loss(model, x0, t, eps, placeholder_cond, concept_cond, alpha: float, sched) -> torch.Tensor:
    """Mismatch between true CFG for the concept and NP sampling of ``c_*`` with the concept as negative."""
    x_t = forward_diffuse(x0, t, eps, sched)
    with torch.no_grad():
        e_u = predict_noise(model, x_t, model.null_condition, t)
        e_c = predict_noise(model, x_t, concept_cond, t)
        target = combine(e_u, e_c, alpha)
    e_star = predict_noise(model, x_t, placeholder_cond, t)
    return F.mse_loss(combine(e_c, e_star, alpha), target)


def sld_ci_step(model, x_t, t, placeholder_cond, safety_cond, alpha: float, mu: float, params: SldParams,
                state: SldState):
    """One inner step: CFG target for the erased concept vs SLD-guided prediction of ``c_*``.

    Advances ``state`` (momentum, history). Returns ``(loss, gamma)``.
    """
    with torch.no_grad():
        e_u = predict_noise(model, x_t, model.null_condition, t)
        e_s = predict_noise(model, x_t, safety_cond, t)
        target = combine(e_u, e_s, alpha)
    e_star = predict_noise(model, x_t, placeholder_cond, t)
    pred, gamma = sld_step(e_u, e_star, e_s, mu, params, state, keep_history=True)
    return F.mse_loss(pred, target), gamma


def sld_window(cfg: InversionConfig, T: int, g: torch.Generator) -> list[int]:
    if cfg.n > T:
        raise ValueError(f"window end n={cfg.n} exceeds T={T}")
    if cfg.span is None:
        lo, hi = cfg.m, cfg.n
    else:
        lo = int(torch.randint(cfg.m, cfg.n - cfg.span + 1, (1,), generator=g))
        hi = lo + cfg.span
    return list(range(lo, hi + 1, cfg.k))


def _examples(images: LabeledImages | torch.Tensor, cfg: InversionConfig) -> torch.Tensor:
    x = images.images if isinstance(images, LabeledImages) else images
    if len(x) == 0:
        raise ValueError("no example images")
    return x[:cfg.n_examples]


def _probe(x, sched, cfg, size):
    g = torch.Generator().manual_seed(cfg.seed + 7919)
    idx = torch.randint(0, len(x), (size,), generator=g)
    t = torch.randint(1, sched.T + 1, (size,), generator=g)
    eps = torch.randn((size, *x.shape[1:]), generator=g)
    return x[idx], t, eps


def _run(model, images, table, cfg: InversionConfig, sched: NoiseSchedule, loss_fn, attack: str, log, source):
    _check_frozen(model)
    x = _examples(images, cfg)
    private = _placeholder_table(model, cfg, table)
    v = private.row(cfg.placeholder)
    opt = torch.optim.Adam([v], lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    probe = _probe(x, sched, cfg, cfg.probe_size)

    def cond():
        return encode_prompt(prompt_for(cfg.placeholder), private)

    with torch.no_grad():
        initial = loss_fn(*probe, cond()).item()
    log = log or CurveLog()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(x), (cfg.batch,), generator=g)
        t = torch.randint(1, sched.T + 1, (cfg.batch,), generator=g)
        eps = torch.randn(x[idx].shape, generator=g)
        loss = loss_fn(x[idx], t, eps, cond())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log(step=step, loss=loss.item())
    with torch.no_grad():
        final = loss_fn(*probe, cond()).item()
    return InversionResult(v.detach().clone(), cfg.placeholder, attack, log.values(), cfg.model_dump(),
                           source, initial, final)


def invert_ti(model, example_images, table, cfg: InversionConfig, sched: NoiseSchedule,
              log: CurveLog | None = None, source: str = "") -> InversionResult:
    def loss_fn(x0, t, eps, c):
        return ti_loss(model, x0, t, eps, c, sched)

    return _run(model, example_images, table, cfg, sched, loss_fn, "ti", log, source)


def invert_np(model, concept_token: str, example_images, table, cfg: InversionConfig, sched: NoiseSchedule,
              alpha: float | None = None, log: CurveLog | None = None, source: str = "") -> InversionResult:
    alpha = cfg.alpha if alpha is None else alpha
    if alpha is None:
        raise ValueError("np_ci needs the guidance scale alpha")
    concept = encode_prompt(prompt_for(concept_token), table if table is not None else model.table)

    def loss_fn(x0, t, eps, c):
        return np_ci_loss(model, x0, t, eps, c, concept, alpha, sched)

    return _run(model, example_images, table, cfg, sched, loss_fn, "np_ci", log, source)


def invert_sld(model, spec: GuidanceSpec, example_images, table, cfg: InversionConfig, sched: NoiseSchedule,
               log: CurveLog | None = None, source: str = "") -> InversionResult:
    """SLD-aware inversion over a strided timestep window per outer step.

    Within an outer step the momentum recursion runs across the visited
    timesteps and the embedding is updated after every inner step. At most
    ``cfg.cap()`` guidance terms are retained.
    """
    if spec.mode != "sld" or spec.sld is None:
        raise ValueError("invert_sld needs an sld guidance spec")
    _check_frozen(model)
    if cfg.m > cfg.n or cfg.k < 1:
        raise ValueError("invalid sld_ci window")
    alpha = cfg.alpha if cfg.alpha is not None else spec.alpha
    x = _examples(example_images, cfg)
    private = _placeholder_table(model, cfg, table)
    safety = encode_prompt(spec.negative_prompt, private)
    v = private.row(cfg.placeholder)
    opt = torch.optim.Adam([v], lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    cap = cfg.cap()
    log = log or CurveLog()
    peak = 0

    def probe_loss():
        with torch.no_grad():
            x0, _, eps = _probe(x, sched, cfg, min(cfg.probe_size, 16))
            state = SldState()
            total = 0.0
            steps = list(range(cfg.m, cfg.n + 1, cfg.k))
            for t in steps:
                c = encode_prompt(prompt_for(cfg.placeholder), private)
                loss, _ = sld_ci_step(model, forward_diffuse(x0, t, eps, sched), t, c, safety, alpha, spec.mu,
                                      spec.sld, state)
                total += loss.item()
            return total / len(steps)

    initial = probe_loss()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(x), (cfg.batch,), generator=g)
        x0 = x[idx]
        eps = torch.randn(x0.shape, generator=g)
        state = SldState()
        losses = []
        for t in sld_window(cfg, sched.T, g):
            c = encode_prompt(prompt_for(cfg.placeholder), private)
            loss, _ = sld_ci_step(model, forward_diffuse(x0, t, eps, sched), t, c, safety, alpha, spec.mu,
                                  spec.sld, state)
            if len(state.history) > cap:
                del state.history[: len(state.history) - cap]
            peak = max(peak, len(state.history))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log(step=step, loss=sum(losses) / len(losses))
    final = probe_loss()
    return InversionResult(v.detach().clone(), cfg.placeholder, "sld_ci", log.values(), cfg.model_dump(),
                           source, initial, final, peak)


def install_embedding(table: TokenEmbeddingTable, token: str, embedding: torch.Tensor) -> TokenEmbeddingTable:
    """Copy of ``table`` with ``token`` set to ``embedding`` (added if missing)."""
    if embedding.shape != (table.dim,):
        raise ValueError(f"embedding dimension {tuple(embedding.shape)} does not match table dimension {table.dim}")
    out = table.copy()
    if token not in out:
        add_placeholder(out, token, ("copy_of", next(iter(out.entries))))
    out.set_row(token, embedding)
    return out


def transfer_embedding(result: InversionResult, base_model, classifier, label: int, n_samples: int, seed: int,
                       sched: NoiseSchedule, guidance: GuidanceSpec | None = None):
    """Install the learned embedding in ``base_model``'s vocabulary and score samples of ``c_*``.

    Returns ``(samples, accuracy)``.
    """
    from .evaluation import sample_accuracy

    table = install_embedding(base_model.table, result.token, result.embedding)
    guidance = guidance or GuidanceSpec(mode="cfg", alpha=3.0)
    return sample_accuracy(base_model, sched, guidance, prompt_for(result.token), label, classifier,
                           n_samples, seed, table=table)
