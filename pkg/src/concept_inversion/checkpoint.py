"""Single-file checkpoint archive.

A zip with fixed member timestamps holding ``meta.json`` plus one ``.npy``
member per tensor, so identical models serialize to identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .conditioning import TokenEmbeddingTable
from .denoiser import ArchConfig, ConditionalDenoiser
from .schedule import NoiseSchedule

FORMAT = "concept-inversion-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(t.detach().cpu().numpy()), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: ConditionalDenoiser, sched: NoiseSchedule, seed: int | None = None,
                    train_config: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    meta = {
        "format": FORMAT,
        "arch": model.arch.to_dict(),
        "schedule": sched.to_dict(),
        "seed": seed,
        "train_config": train_config or {},
        "params": list(state),
        "tokens": model.table.tokens,
        "frozen": sorted(model.table.frozen),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, tensor in state.items():
            _write(zf, f"params/{name}.npy", _npy_bytes(tensor))
        for i, tok in enumerate(model.table.tokens):
            _write(zf, f"table/{i:04d}.npy", _npy_bytes(model.table.row(tok)))
    return path


def load_checkpoint(path) -> tuple[ConditionalDenoiser, NoiseSchedule, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {n: torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{n}.npy")))) for n in meta["params"]}
        rows = [torch.from_numpy(np.load(io.BytesIO(zf.read(f"table/{i:04d}.npy")))) for i in range(len(meta["tokens"]))]
    table = TokenEmbeddingTable(rows[0].shape[0])
    for tok, row in zip(meta["tokens"], rows):
        table.entries[tok] = row
    table.frozen = set(meta["frozen"])
    for tok in table.trainable:
        table.entries[tok].requires_grad_(True)
    model = ConditionalDenoiser(ArchConfig.from_dict(meta["arch"]), table)
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, NoiseSchedule.from_dict(meta["schedule"]), meta


def parameter_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_state(path, state: dict, meta: dict | None = None) -> Path:
    """Deterministic archive for an arbitrary state dict (used for the judge classifier)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"params": list(state), **(meta or {})}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, tensor in state.items():
            _write(zf, f"params/{name}.npy", _npy_bytes(tensor))
    return path


def load_state(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        state = {n: torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{n}.npy")))) for n in meta["params"]}
    return state, meta
