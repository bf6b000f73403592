"""Inference-time erasure: guidance specs only, the model is left untouched."""
from __future__ import annotations

from ..conditioning import prompt_for
from ..guidance import GuidanceSpec, SldParams, sld_variant


def _check(model, concept_token):
    if model is not None and concept_token not in model.table:
        raise KeyError(f"unknown token {concept_token!r}")


def concept_prompt(concept_token: str, form: str = "prompt") -> list[str]:
    """The text used as negative / safety concept: the bare name (``token``) or the full ``prompt``."""
    if form == "token":
        return [concept_token]
    if form == "prompt":
        return prompt_for(concept_token)
    raise ValueError(f"unknown negative form {form!r}")


def make_np_guidance(concept_token: str, alpha: float = 3.0, model=None, form: str = "prompt") -> GuidanceSpec:
    _check(model, concept_token)
    return GuidanceSpec(mode="negative_prompt", alpha=alpha, negative_prompt=concept_prompt(concept_token, form))


def make_sld_guidance(concept_token: str, variant: str | SldParams = "medium", mu: float = 3.0,
                      model=None, form: str = "prompt") -> GuidanceSpec:
    _check(model, concept_token)
    params = sld_variant(variant) if isinstance(variant, str) else variant
    return GuidanceSpec(mode="sld", mu=mu, alpha=mu, negative_prompt=concept_prompt(concept_token, form),
                        sld=params)
