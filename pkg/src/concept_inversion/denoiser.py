"""Small cross-attention U-Net noise predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import NULL_TOKEN, TokenEmbeddingTable, encode_prompt


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 28
    channels: tuple[int, int] = (16, 32)
    embed_dim: int = 64
    heads: int = 4
    groups: int = 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1).to(dtype)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Image features attend over the condition token sequence.

    ``to_k`` and ``to_v`` are bias-free linear maps from the token embedding
    space, which is what the closed-form key/value edit rewrites.
    """

    def __init__(self, channels: int, embed_dim: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(embed_dim, channels, bias=False)
        self.to_v = nn.Linear(embed_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond, mask=None):
        B, C, H, W = x.shape
        L = cond.shape[1]
        dh = C // self.heads
        h = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(h).view(B, H * W, self.heads, dh).transpose(1, 2)
        k = self.to_k(cond).view(B, L, self.heads, dh).transpose(1, 2)
        v = self.to_v(cond).view(B, L, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        # explicit softmax: much faster than the fused kernel for a handful of keys on CPU
        e = (scores - scores.amax(dim=-1, keepdim=True).detach()).exp()
        attn = e / e.sum(dim=-1, keepdim=True)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        return x + self.to_out(out).transpose(1, 2).reshape(B, C, H, W), attn


class ConditionalDenoiser(nn.Module):
    """epsilon-prediction network eps(x_t, c, t).

    ``table`` holds the (frozen) token embeddings the network was trained
    with; the null condition is its ``<null>`` row.
    """

    def __init__(self, arch: ArchConfig = ArchConfig(), table: TokenEmbeddingTable | None = None):
        super().__init__()
        self.arch = arch
        self.table = table
        c1, c2 = arch.channels
        g, d = arch.groups, arch.embed_dim
        tdim = 4 * c1
        self.time_mlp = nn.Sequential(nn.Linear(c1, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(1, c1, 3, padding=1)
        self.res_in = ResBlock(c1, c1, tdim, g)
        self.attn_in = CrossAttention(c1, d, arch.heads, g)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res_down = ResBlock(c2, c2, tdim, g)
        self.attn_down = CrossAttention(c2, d, arch.heads, g)
        self.res_mid = ResBlock(c2, c2, tdim, g)
        self.attn_mid = CrossAttention(c2, d, arch.heads, g)
        self.up = nn.Conv2d(c2, c1, 3, padding=1)
        self.res_out = ResBlock(2 * c1, c1, tdim, g)
        self.attn_out = CrossAttention(c1, d, arch.heads, g)
        self.norm_out = nn.GroupNorm(g, c1)
        self.conv_out = nn.Conv2d(c1, 1, 3, padding=1)

    def cross_attention_modules(self) -> dict[str, CrossAttention]:
        return {n: m for n, m in self.named_modules() if isinstance(m, CrossAttention)}

    @property
    def null_condition(self) -> torch.Tensor:
        return encode_prompt([NULL_TOKEN], self.table)

    def forward(self, x, t, cond, mask=None, return_attn: bool = False):
        temb = self.time_mlp(timestep_embedding(t, self.arch.channels[0], x.dtype))
        h0, a0 = self.attn_in(self.res_in(self.conv_in(x), temb), cond, mask)
        h = self.res_down(self.down(h0), temb)
        h, a1 = self.attn_down(h, cond, mask)
        h = self.res_mid(h, temb)
        h, a2 = self.attn_mid(h, cond, mask)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h, a3 = self.attn_out(self.res_out(torch.cat([h, h0], dim=1), temb), cond, mask)
        out = self.conv_out(F.silu(self.norm_out(h)))
        if return_attn:
            return out, [a0, a1, a2, a3]
        return out


def cross_attention_parameter_names(model: ConditionalDenoiser) -> list[str]:
    prefixes = tuple(f"{n}." for n in model.cross_attention_modules())
    return [n for n, _ in model.named_parameters() if n.startswith(prefixes)]


def _batch_inputs(model, x_t, c, t):
    if x_t.ndim != 4 or x_t.shape[1:] != (1, model.arch.image_size, model.arch.image_size):
        raise ValueError(f"expected images of shape (B, 1, {model.arch.image_size}, {model.arch.image_size}), got {tuple(x_t.shape)}")
    B = x_t.shape[0]
    if c.ndim == 2:
        c = c.unsqueeze(0).expand(B, -1, -1)
    if c.ndim != 3 or c.shape[0] != B or c.shape[2] != model.arch.embed_dim:
        raise ValueError(f"condition shape {tuple(c.shape)} incompatible with batch {B} and dim {model.arch.embed_dim}")
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(B)
    return x_t, c.to(x_t.dtype), t


def predict_noise(model: ConditionalDenoiser, x_t, c, t, sched=None, return_attn: bool = False):
    """Evaluate eps(x_t, c, t). ``c`` is ``(L, d)`` (shared) or ``(B, L, d)``."""
    x_t, c, t = _batch_inputs(model, x_t, c, t)
    if sched is not None:
        sched.check_step(t)
    elif int(t.min()) < 1:
        raise ValueError("step indices start at 1")
    return model(x_t, t, c, return_attn=return_attn)
