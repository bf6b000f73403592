"""Run configuration: one strict schema, YAML on disk.

Unknown keys anywhere are rejected. Every stage seed is derived from the
global seed and the stage name (see :func:`derive_seed`).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .classifier import ClassifierConfig
from .diffusion import TrainConfig
from .erasure import AcConfig, EsdConfig, FmnConfig, SaConfig, UceConfig
from .guidance import SLD_VARIANTS, SldParams
from .inversion import InversionConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    source: str = "mlxtend-mnist5k"
    classes: list[int] = list(range(10))
    image_size: Literal[28] = 28
    n_attack: int = 50
    n_test: int = 50
    max_train_per_class: int | None = Field(None, ge=1)


class ScheduleConfig(_Strict):
    T: int = Field(100, ge=1)
    kind: str = "linear"
    beta_min: float = 1e-3
    beta_max: float = 0.2


class ArchSection(_Strict):
    channels: tuple[int, int] = (16, 32)
    embed_dim: int = 64
    heads: int = 4
    groups: int = 8


class DiffusionSection(_Strict):
    schedule: ScheduleConfig = ScheduleConfig()
    arch: ArchSection = ArchSection()
    train: TrainConfig = TrainConfig()


class ErasureSection(_Strict):
    esd: EsdConfig = EsdConfig()
    uce: UceConfig = UceConfig()
    sa: SaConfig = SaConfig()
    fmn: FmnConfig = FmnConfig()
    ac: AcConfig = AcConfig()


class GuidanceSection(_Strict):
    alpha: float = 3.0
    mu: float = 3.0
    sld_variant: str = "medium"
    # NP negative / SLD safety text: the bare concept token or the full prompt
    negative_form: Literal["token", "prompt"] = "prompt"
    sld_variants: dict[str, SldParams] = dict(SLD_VARIANTS)


class InversionSection(_Strict):
    ti: InversionConfig = InversionConfig(attack="ti", steps=2000, batch=8)
    np_ci: InversionConfig = InversionConfig(attack="np_ci", steps=2000, batch=8)
    sld_ci: InversionConfig = InversionConfig(attack="sld_ci", k=4, span=12, lr=2e-4)


class EvalSection(_Strict):
    n_samples: int = Field(200, ge=1)
    concepts: list[str] = ["<digit-3>"]
    methods: list[str] = ["esd", "uce", "sa", "fmn", "ac", "np", "sld"]
    preserve_concept: str = "<digit-7>"
    exclusion_class: int = 0
    grid_size: int = 16


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = DatasetConfig()
    diffusion: DiffusionSection = DiffusionSection()
    classifier: ClassifierConfig = ClassifierConfig()
    erasure: ErasureSection = ErasureSection()
    guidance: GuidanceSection = GuidanceSection()
    inversion: InversionSection = InversionSection()
    eval: EvalSection = EvalSection()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()[:12]


class ConfigError(ValueError):
    pass


def derive_seed(global_seed: int, stage: str) -> int:
    """``sha256("<global_seed>:<stage>")`` truncated to 31 bits."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"])
        if e["type"] == "extra_forbidden":
            lines.append(f"unknown config key '{key}'")
        else:
            lines.append(f"invalid value for '{key}': {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(yaml.safe_load(path.read_text()))


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
    return path
