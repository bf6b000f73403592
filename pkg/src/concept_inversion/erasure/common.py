"""Shared fine-tuning plumbing for the weight-editing erasure methods."""
from __future__ import annotations

import copy
import json
from collections.abc import Iterable
from pathlib import Path

import torch

from ..conditioning import encode_prompt, prompt_for
from ..denoiser import ConditionalDenoiser, cross_attention_parameter_names


def trainable_copy(model: ConditionalDenoiser) -> ConditionalDenoiser:
    """Private deep copy with gradients enabled on nothing yet."""
    clone = copy.deepcopy(model)
    clone.table = model.table.copy()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def select_parameters(model: ConditionalDenoiser, scope: str) -> list[tuple[str, torch.nn.Parameter]]:
    """``cross_attention`` (alias ``x``), ``attention_keys`` (the key projections
    of the cross-attention blocks), ``non_cross_attention`` (``u``) or ``full``."""
    xattn = set(cross_attention_parameter_names(model))
    named = list(model.named_parameters())
    if scope in ("cross_attention", "x"):
        chosen = [(n, p) for n, p in named if n in xattn]
    elif scope == "attention_keys":
        chosen = [(n, p) for n, p in named if n in xattn and ".to_k." in n]
    elif scope in ("non_cross_attention", "u"):
        chosen = [(n, p) for n, p in named if n not in xattn]
    elif scope == "full":
        chosen = named
    else:
        raise ValueError(f"unknown parameter scope {scope!r}")
    if not chosen:
        raise ValueError(f"parameter scope {scope!r} selects no parameters")
    return chosen


def enable(params: Iterable[tuple[str, torch.nn.Parameter]]) -> list[torch.nn.Parameter]:
    out = []
    for _, p in params:
        p.requires_grad_(True)
        out.append(p)
    return out


def freeze(model: ConditionalDenoiser) -> ConditionalDenoiser:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def concept_condition(model: ConditionalDenoiser, token: str) -> torch.Tensor:
    if token not in model.table:
        raise KeyError(f"unknown token {token!r}")
    return encode_prompt(prompt_for(token), model.table)


class CurveLog:
    """Collects per-step metrics; optionally mirrors them to a JSONL file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, **row) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")

    def values(self, key: str = "loss") -> list[float]:
        return [r[key] for r in self.rows]
