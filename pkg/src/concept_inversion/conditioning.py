"""Token vocabulary, prompt encoding and placeholder tokens.

The encoder is the identity: a prompt is the stacked sequence of its token
rows, fed straight into the denoiser's cross-attention.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

NULL_TOKEN = "<null>"
TEMPLATE = ("a", "photo", "of")


def class_token(label: int) -> str:
    return f"<digit-{label}>"


def token_label(token: str) -> int | None:
    if token.startswith("<digit-") and token.endswith(">"):
        return int(token[len("<digit-"):-1])
    return None


def prompt_for(token: str) -> list[str]:
    """Class prompt template, e.g. ``["a", "photo", "of", "<digit-3>"]``."""
    return [*TEMPLATE, token]


def base_vocabulary(num_classes: int = 10) -> list[str]:
    return [NULL_TOKEN, *TEMPLATE, *(class_token(i) for i in range(num_classes))]


class TokenEmbeddingTable:
    """Map from token string to an embedding row of dimension ``dim``.

    Frozen rows are plain tensors. Trainable rows (placeholders) are leaf
    tensors with ``requires_grad`` set, so an optimizer over
    :meth:`trainable_parameters` can never touch a frozen row.
    """

    def __init__(self, dim: int, placeholder_prefix: str = "<*"):
        self.dim = dim
        self.placeholder_prefix = placeholder_prefix
        self.entries: dict[str, torch.Tensor] = {}
        self.frozen: set[str] = set()

    @classmethod
    def from_matrix(cls, tokens, weight: torch.Tensor, placeholder_prefix: str = "<*"):
        table = cls(weight.shape[1], placeholder_prefix)
        for tok, row in zip(tokens, weight):
            table.entries[tok] = row.detach().clone()
            table.frozen.add(tok)
        return table

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tokens(self) -> list[str]:
        return list(self.entries)

    @property
    def trainable(self) -> set[str]:
        return set(self.entries) - self.frozen

    def is_placeholder(self, token: str) -> bool:
        return token.startswith(self.placeholder_prefix)

    def row(self, token: str) -> torch.Tensor:
        try:
            return self.entries[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def set_row(self, token: str, value: torch.Tensor) -> None:
        if token not in self.entries:
            raise KeyError(f"unknown token {token!r}")
        value = torch.as_tensor(value)
        if value.shape != (self.dim,):
            raise ValueError(f"row for {token!r} must have shape ({self.dim},), got {tuple(value.shape)}")
        old = self.entries[token]
        new = value.detach().clone().to(old.dtype)
        if token not in self.frozen:
            new.requires_grad_(True)
        self.entries[token] = new

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [self.entries[t] for t in self.entries if t not in self.frozen]

    def copy(self) -> "TokenEmbeddingTable":
        out = TokenEmbeddingTable(self.dim, self.placeholder_prefix)
        for tok, row in self.entries.items():
            r = row.detach().clone()
            if tok not in self.frozen:
                r.requires_grad_(True)
            out.entries[tok] = r
        out.frozen = set(self.frozen)
        return out

    def to(self, dtype: torch.dtype) -> "TokenEmbeddingTable":
        for tok, row in self.entries.items():
            r = row.detach().to(dtype)
            if tok not in self.frozen:
                r.requires_grad_(True)
            self.entries[tok] = r
        return self

    def matrix(self, tokens=None) -> torch.Tensor:
        tokens = self.tokens if tokens is None else tokens
        return torch.stack([self.entries[t].detach() for t in tokens])

    def fingerprint(self, exclude_placeholders: bool = True) -> str:
        import hashlib

        h = hashlib.sha256()
        for tok in sorted(self.entries):
            if exclude_placeholders and self.is_placeholder(tok):
                continue
            h.update(tok.encode())
            h.update(self.entries[tok].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def encode_prompt(tokens, table: TokenEmbeddingTable) -> torch.Tensor:
    """Return the ``(len(tokens), dim)`` condition sequence for ``tokens``."""
    if isinstance(tokens, str):
        raise TypeError("tokens must be a sequence of token strings, not a str")
    if len(tokens) == 0:
        raise ValueError("empty prompt")
    return torch.stack([table.row(t) for t in tokens])


def add_placeholder(table: TokenEmbeddingTable, name: str, init="random", *, seed: int = 0) -> str:
    """Add a trainable row ``name``.

    ``init`` is ``"random"`` (N(0, 0.01 I) from ``seed``) or
    ``("copy_of", token)`` / ``"copy_of:<token>"``.
    """
    if name in table.entries:
        raise ValueError(f"token {name!r} already exists")
    if not name.startswith(table.placeholder_prefix):
        raise ValueError(f"placeholder names must start with {table.placeholder_prefix!r}")
    dtype = next(iter(table.entries.values())).dtype if table.entries else torch.float32
    if init == "random":
        g = torch.Generator().manual_seed(seed)
        row = 0.1 * torch.randn(table.dim, generator=g, dtype=torch.float64)
        row = row.to(dtype)
    else:
        if isinstance(init, str) and init.startswith("copy_of:"):
            source = init.split(":", 1)[1]
        elif isinstance(init, (tuple, list)) and len(init) == 2 and init[0] == "copy_of":
            source = init[1]
        else:
            raise ValueError(f"unknown init {init!r}")
        if source not in table.entries:
            raise KeyError(f"copy source {source!r} missing from table")
        row = table.entries[source].detach().clone()
    table.entries[name] = row.clone().requires_grad_(True)
    return name


def save_embedding(path, token: str, vector: torch.Tensor) -> Path:
    """Write one learned embedding as JSON; float32 values round-trip exactly."""
    vec = vector.detach().cpu().to(torch.float32).numpy()
    payload = {
        "token": token,
        "dim": int(vec.shape[0]),
        "dtype": "float32",
        "values": [float(v) for v in vec],
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_embedding(path) -> tuple[str, torch.Tensor]:
    payload = json.loads(Path(path).read_text())
    values = np.asarray(payload["values"], dtype=np.float32)
    if values.shape != (payload["dim"],):
        raise ValueError(f"{path}: dim {payload['dim']} does not match {values.shape[0]} values")
    return payload["token"], torch.from_numpy(values)
