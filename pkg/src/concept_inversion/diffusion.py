"""Denoiser training with condition dropout, and guided ancestral sampling."""
from __future__ import annotations

import logging
from collections.abc import Callable

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .conditioning import NULL_TOKEN, TokenEmbeddingTable, class_token, encode_prompt, prompt_for
from .data import LabeledImages
from .denoiser import ArchConfig, ConditionalDenoiser, predict_noise
from .guidance import GuidanceSpec, SldState, guided_noise
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(150, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(2e-3, gt=0)
    p_uncond: float = Field(0.1, ge=0, le=1)
    seed: int = 0
    ema_decay: float = Field(0.995, ge=0, lt=1)
    zero_init_conditioning: bool = False


def init_table(tokens, dim: int, seed: int) -> TokenEmbeddingTable:
    """Random initial embeddings (std 1) for a base vocabulary."""
    g = torch.Generator().manual_seed(seed)
    weight = torch.randn(len(tokens), dim, generator=g)
    return TokenEmbeddingTable.from_matrix(tokens, weight)


def prompt_batch(labels: torch.Tensor, drop: torch.Tensor, tokens: list[str], length: int = 4):
    """Token indices and key mask for a batch; dropped rows become the masked null prompt."""
    index = {t: i for i, t in enumerate(tokens)}
    ids = torch.empty(len(labels), length, dtype=torch.long)
    mask = torch.ones(len(labels), length, dtype=torch.bool)
    null = index[NULL_TOKEN]
    for row, (label, dropped) in enumerate(zip(labels.tolist(), drop.tolist())):
        if dropped:
            ids[row] = null
            mask[row, 1:] = False
        else:
            ids[row] = torch.tensor([index[t] for t in prompt_for(class_token(label))])
    return ids, mask


def denoising_loss(model, x0, cond, t, eps, sched, mask=None) -> torch.Tensor:
    x_t = forward_diffuse(x0, t, eps, sched)
    return F.mse_loss(model(x_t, t, cond, mask), eps)


def train_denoiser(dataset: LabeledImages, table: TokenEmbeddingTable, cfg: TrainConfig,
                   sched: NoiseSchedule, arch: ArchConfig = ArchConfig(),
                   on_epoch: Callable[[int, float], None] | None = None) -> ConditionalDenoiser:
    """Fit eps-prediction jointly with the table's rows; returns the EMA weights.

    The returned model carries a frozen copy of the trained table and a
    ``train_curve`` list of per-epoch mean losses.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    for label in dataset.classes:
        if class_token(label) not in table:
            raise KeyError(f"label {label} has no token {class_token(label)!r} in the table")
    torch.manual_seed(cfg.seed)
    model = ConditionalDenoiser(arch)
    if cfg.zero_init_conditioning:
        # with both zero, neither receives gradient, so the output never depends on the condition
        for m in model.cross_attention_modules().values():
            torch.nn.init.zeros_(m.to_v.weight)
            torch.nn.init.zeros_(m.to_out.weight)
            torch.nn.init.zeros_(m.to_out.bias)
    tokens = table.tokens
    emb = torch.nn.Parameter(table.matrix(tokens).clone())
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ema_emb = emb.detach().clone()
    opt = torch.optim.Adam([*model.parameters(), emb], lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    n = len(dataset)
    curve = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x0 = dataset.images[idx]
            labels = dataset.labels[idx]
            B = len(idx)
            drop = torch.rand(B, generator=g) < cfg.p_uncond
            t = torch.randint(1, sched.T + 1, (B,), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            ids, mask = prompt_batch(labels, drop, tokens)
            loss = denoising_loss(model, x0, emb[ids], t, eps, sched, mask)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(cfg.ema_decay).add_(v, alpha=1 - cfg.ema_decay)
                    else:
                        ema[k].copy_(v)
                ema_emb.mul_(cfg.ema_decay).add_(emb.detach(), alpha=1 - cfg.ema_decay)
            total += loss.item() * B
            count += B
        curve.append(total / count)
        log.info("epoch %d loss %.5f", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    model.load_state_dict(ema)
    model.table = TokenEmbeddingTable.from_matrix(tokens, ema_emb)
    model.train_curve = curve
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def sample(model: ConditionalDenoiser, sched: NoiseSchedule, guidance: GuidanceSpec, c: torch.Tensor,
           seed: int, n_steps: int | None = None, n: int = 1, table: TokenEmbeddingTable | None = None,
           clip: bool = True, step_callback=None) -> torch.Tensor:
    """Ancestral sampling from seeded noise; returns ``(n, 1, H, W)`` in [-1, 1].

    ``n_steps`` runs the last ``n_steps`` steps of the chain from noise at
    ``t = n_steps`` (default ``T``). The predicted x0 is clipped to [-1, 1].
    """
    n_steps = sched.T if n_steps is None else n_steps
    if not 1 <= n_steps <= sched.T:
        raise ValueError(f"n_steps must be in [1, {sched.T}]")
    dtype = next(model.parameters()).dtype
    size = model.arch.image_size
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 1, size, size, generator=g, dtype=torch.float64).to(dtype)
    c = c.to(dtype)
    state = SldState()
    betas = torch.as_tensor(sched.betas, dtype=torch.float64)
    abars = torch.as_tensor(sched.alpha_bars, dtype=torch.float64)
    for t in range(n_steps, 0, -1):
        eps = guided_noise(model, x, c, t, guidance, state, sched, table)
        if step_callback is not None:
            step_callback(t, x, eps)
        abar = abars[t - 1].item()
        abar_prev = abars[t - 2].item() if t > 1 else 1.0
        beta = betas[t - 1].item()
        x0 = (x - (1 - abar) ** 0.5 * eps) / abar ** 0.5
        if clip:
            x0 = x0.clamp(-1, 1)
        mean = (abar_prev ** 0.5 * beta / (1 - abar)) * x0 + ((1 - beta) ** 0.5 * (1 - abar_prev) / (1 - abar)) * x
        if t > 1:
            var = beta * (1 - abar_prev) / (1 - abar)
            z = torch.randn(x.shape, generator=g, dtype=torch.float64).to(dtype)
            x = mean + var ** 0.5 * z
        else:
            x = mean
    return x.clamp(-1, 1)


def sample_prompt(model, sched, guidance, tokens, seed, n=1, table=None, **kw):
    table = table or model.table
    return sample(model, sched, guidance, encode_prompt(tokens, table), seed, n=n, table=table, **kw)


def conditional_gap(model, x_t, token: str, t: int) -> torch.Tensor:
    """Elementwise difference between the class-conditioned and null predictions."""
    c = encode_prompt(prompt_for(token), model.table)
    return predict_noise(model, x_t, c, t) - predict_noise(model, x_t, model.null_condition, t)
