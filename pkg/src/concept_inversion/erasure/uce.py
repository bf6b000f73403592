"""Closed-form key/value projection edit of every cross-attention block."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from pydantic import BaseModel, ConfigDict, Field

from ..conditioning import NULL_TOKEN
from .common import freeze, trainable_copy


class UceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    guide_token: str = NULL_TOKEN
    preserve_tokens: list[str] | None = None
    ridge: float = Field(1e-4, ge=0)


@dataclass
class UceEdit:
    """Edit ``source`` embeddings so each projection maps them where ``target`` used to go.

    For a projection ``W`` the desired output of ``source_i`` is ``W @ target_i``.
    """

    edit_pairs: list[tuple[torch.Tensor, torch.Tensor]]
    preserve_set: list[torch.Tensor] = field(default_factory=list)
    ridge: float = 1e-4

    def __post_init__(self):
        if not self.edit_pairs:
            raise ValueError("UCE needs at least one edit pair")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        dims = {v.shape[-1] for pair in self.edit_pairs for v in pair} | {v.shape[-1] for v in self.preserve_set}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")


def uce_closed_form(W: torch.Tensor, sources, targets_out, preserve, ridge: float) -> torch.Tensor:
    """Minimize sum ||W' c_i - v_i||^2 + sum ||W' c_j - W c_j||^2 + ridge ||W' - W||_F^2.

    ``W`` is ``(out, in)``; the solution is computed in float64 and returned
    in ``W``'s dtype.
    """
    W64 = W.detach().to(torch.float64)
    d = W64.shape[1]
    lhs = ridge * torch.eye(d, dtype=torch.float64)
    rhs = ridge * W64
    for c, v in zip(sources, targets_out):
        c = c.detach().to(torch.float64)
        lhs = lhs + torch.outer(c, c)
        rhs = rhs + torch.outer(v.detach().to(torch.float64), c)
    for c in preserve:
        c = c.detach().to(torch.float64)
        lhs = lhs + torch.outer(c, c)
        rhs = rhs + torch.outer(W64 @ c, c)
    if ridge == 0 and torch.linalg.matrix_rank(lhs) < d:
        raise ValueError("normal matrix is singular; use a positive ridge")
    # W' lhs = rhs and lhs is symmetric, so W'^T = lhs^{-1} rhs^T
    return torch.linalg.solve(lhs, rhs.T).T.to(W.dtype)


def erase_uce(model, edit: UceEdit):
    """Rewrite ``to_k`` and ``to_v`` of every cross-attention block in a copy; no gradient steps."""
    edited = trainable_copy(model)
    sources = [s for s, _ in edit.edit_pairs]
    with torch.no_grad():
        for block in edited.cross_attention_modules().values():
            for proj in (block.to_k, block.to_v):
                W = proj.weight
                targets = [W @ tgt.to(W.dtype) for _, tgt in edit.edit_pairs]
                proj.weight.copy_(uce_closed_form(W, sources, targets, edit.preserve_set, edit.ridge))
    return freeze(edited)


def make_uce_edit(model, concept_token: str, cfg: UceConfig) -> UceEdit:
    table = model.table
    for tok in (concept_token, cfg.guide_token):
        if tok not in table:
            raise KeyError(f"unknown token {tok!r}")
    preserve = cfg.preserve_tokens
    if preserve is None:
        preserve = [t for t in table.tokens if t != concept_token and not table.is_placeholder(t)]
    return UceEdit([(table.row(concept_token), table.row(cfg.guide_token))],
                   [table.row(t) for t in preserve], cfg.ridge)
