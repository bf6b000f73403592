"""Classifier-based measurement of erasure and recovery, and report assembly."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .conditioning import encode_prompt, prompt_for, token_label
from .diffusion import sample
from .guidance import GuidanceSpec

log = logging.getLogger(__name__)

STAGES = ("base", "erased", "ci", "transfer")


def sample_accuracy(model, sched, guidance: GuidanceSpec, tokens, label: int, classifier, n_samples: int,
                    seed: int, table=None, chunk: int = 200):
    """Sample ``n_samples`` images for ``tokens`` and return ``(samples, top-1 accuracy for label)``."""
    table = table if table is not None else model.table
    cond = encode_prompt(tokens, table)
    parts = []
    for i, start in enumerate(range(0, n_samples, chunk)):
        n = min(chunk, n_samples - start)
        parts.append(sample(model, sched, guidance, cond, seed=seed + i, n=n, table=table))
    images = torch.cat(parts)
    preds = classifier.predict(images)
    return images, (preds == label).float().mean().item()


def concept_accuracy(model, guidance: GuidanceSpec, concept_token: str, classifier, n_samples: int, seed: int,
                     sched, table=None, label: int | None = None) -> float:
    """Fraction of samples prompted with ``concept_token`` that the judge assigns to its class.

    Placeholder tokens need an explicit ``label``.
    """
    table = table if table is not None else model.table
    if concept_token not in table:
        raise KeyError(f"unknown token {concept_token!r}")
    label = token_label(concept_token) if label is None else label
    if label is None:
        raise ValueError(f"no class label for token {concept_token!r}; pass label=")
    _, acc = sample_accuracy(model, sched, guidance, prompt_for(concept_token), label, classifier, n_samples,
                             seed, table=table)
    return acc


@dataclass
class EvalRecord:
    concept: str
    method: str
    stage: str
    accuracy: float | None
    n: int
    seed: int
    skip_reason: str | None = None
    grid: str | None = None


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, **kw) -> EvalRecord:
        rec = EvalRecord(**kw)
        if rec.accuracy is not None and not 0.0 <= rec.accuracy <= 1.0:
            raise ValueError(f"accuracy {rec.accuracy} outside [0, 1]")
        self.records.append(rec)
        return rec

    def get(self, concept: str, method: str, stage: str) -> EvalRecord | None:
        for r in self.records:
            if (r.concept, r.method, r.stage) == (concept, method, stage):
                return r
        return None

    def accuracy(self, concept, method, stage) -> float | None:
        r = self.get(concept, method, stage)
        return None if r is None else r.accuracy

    def cells(self) -> list[tuple[str, str]]:
        seen = []
        for r in self.records:
            if r.method != "base" and (r.concept, r.method) not in seen:
                seen.append((r.concept, r.method))
        return seen

    def is_complete(self) -> bool:
        for concept, method in self.cells():
            for stage in ("erased", "ci", "transfer"):
                r = self.get(concept, method, stage)
                if r is None or (r.accuracy is None and not r.skip_reason):
                    return False
        return True

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records], "config": self.config},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls([EvalRecord(**r) for r in data["records"]], data.get("config", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def to_markdown(self) -> str:
        """Accuracy (%) table: base column, then ``erased / CI`` per method."""
        concepts = list(dict.fromkeys(c for c, _ in self.cells()))
        methods = list(dict.fromkeys(m for _, m in self.cells()))

        def pct(v):
            return "skip" if v is None else f"{100 * v:.1f}"

        lines = ["| concept | base | " + " | ".join(methods) + " |",
                 "|---" * (len(methods) + 2) + "|"]
        for c in concepts:
            base = self.accuracy(c, "base", "base")
            cells = [f"{pct(self.accuracy(c, m, 'erased'))} / {pct(self.accuracy(c, m, 'ci'))}" for m in methods]
            lines.append(f"| {c} | {pct(base)} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def run_exclusion_study(exp, excluded_class: int):
    """TI recovery of ``excluded_class`` on the full model vs a model trained without it.

    Returns a dict with both accuracies and their gap.
    """
    if excluded_class not in exp.splits.train.classes:
        raise ValueError(f"class {excluded_class} not in dataset")
    full = exp.base_model()
    excluded = exp.excluded_model(excluded_class)
    out = {}
    for name, (model, sched) in {"full": full, "excluded": excluded}.items():
        result = exp.invert(f"exclusion-{name}-{excluded_class}", model, sched, "ti",
                            exp.splits.attack.of_class(excluded_class))
        acc = exp.placeholder_accuracy(model, sched, result, excluded_class, f"exclusion-{name}")
        out[name] = acc
    out["gap"] = out["full"] - out["excluded"]
    return out


def full_matrix(exp, concepts=None, methods=None) -> EvalReport:
    """Erase, evaluate, attack, evaluate and transfer for every (concept, method).

    Cell failures are recorded as skips with the error message.
    """
    concepts = concepts or exp.cfg.eval.concepts
    methods = methods or exp.cfg.eval.methods
    report = EvalReport(config=exp.cfg.model_dump(mode="json"))
    n = exp.cfg.eval.n_samples
    for concept in concepts:
        acc, seed = exp.base_accuracy(concept)
        report.add(concept=concept, method="base", stage="base", accuracy=acc, n=n, seed=seed,
                   grid=exp.grid_path(concept, "base", "base"))
        for method in methods:
            for stage in ("erased", "ci", "transfer"):
                try:
                    acc, seed = exp.stage_accuracy(concept, method, stage)
                    report.add(concept=concept, method=method, stage=stage, accuracy=acc, n=n, seed=seed,
                               grid=exp.grid_path(concept, method, stage))
                except Exception as err:  # recorded, matrix continues
                    log.exception("cell %s/%s/%s failed", concept, method, stage)
                    report.add(concept=concept, method=method, stage=stage, accuracy=None, n=n, seed=-1,
                               skip_reason=f"{type(err).__name__}: {err}")
    return report
