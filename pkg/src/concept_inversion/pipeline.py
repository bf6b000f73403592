"""Experiment orchestration with an on-disk artifact cache.

Each artifact lives in a directory named after the stage and a hash of the
configuration it depends on, so a rerun with the same config reuses it and
a changed config rebuilds it.
"""
from __future__ import annotations

import hashlib
import json
import logging
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, load_state, parameter_hash, save_checkpoint, save_state
from .classifier import DigitClassifier, train_classifier
from .conditioning import base_vocabulary, load_embedding, prompt_for, save_embedding, token_label
from .config import RunConfig, derive_seed, dump_config
from .data import load_mnist, make_splits
from .denoiser import ArchConfig
from .diffusion import init_table, train_denoiser
from .erasure import (
    CurveLog, erase_ac, erase_esd, erase_fmn, erase_sa, erase_uce, make_np_guidance, make_sld_guidance,
    make_uce_edit,
)
from .evaluation import sample_accuracy
from .guidance import GuidanceSpec, SldParams
from .inversion import InversionResult, install_embedding, invert_np, invert_sld, invert_ti
from .schedule import make_schedule

log = logging.getLogger(__name__)

ATTACK_FOR = {"esd": "ti", "uce": "ti", "sa": "ti", "fmn": "ti", "ac": "ti", "np": "np_ci", "sld": "sld_ci"}


def _hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def method_family(method: str) -> str:
    return method.split("-", 1)[0]


def save_grid(images: torch.Tensor, path, ncol: int = 8) -> Path:
    imgs = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()[:, 0]
    n, h, w = imgs.shape
    nrow = -(-n // ncol)
    canvas = np.zeros((nrow * (h + 2), ncol * (w + 2)), dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, ncol)
        canvas[r * (h + 2) + 1:r * (h + 2) + 1 + h, c * (w + 2) + 1:c * (w + 2) + 1 + w] = im
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    return path


class Experiment:
    def __init__(self, cfg: RunConfig, workdir):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._models = {}
        # stage name -> directory it last resolved to; the workdir may also hold stale stages
        self.stage_dirs: dict[str, Path] = {}

    def seed(self, stage: str) -> int:
        return derive_seed(self.cfg.seed, stage)

    # data ---------------------------------------------------------------

    @cached_property
    def splits(self):
        d = self.cfg.dataset
        if d.source != "mlxtend-mnist5k":
            raise ValueError(f"unsupported dataset source {d.source!r}")
        return make_splits(load_mnist(), d.n_attack, d.n_test, self.seed("splits"), d.classes,
                           d.max_train_per_class)

    @cached_property
    def schedule(self):
        s = self.cfg.diffusion.schedule
        return make_schedule(s.T, s.kind, s.beta_min, s.beta_max)

    @property
    def sample_seed(self) -> int:
        return self.seed("eval-samples")

    def _dir(self, stage: str, *deps) -> Path:
        d = self.workdir / f"{stage}-{_hash(self.cfg.seed, self.cfg.dataset.model_dump(), *deps)}"
        d.mkdir(parents=True, exist_ok=True)
        self.stage_dirs[stage] = d
        return d

    # training -------------------------------------------------------------

    def train_config(self, stage: str = "train"):
        return self.cfg.diffusion.train.model_copy(update={"seed": self.seed(stage)})

    def _train(self, stage: str, dataset, ckpt: Path):
        if ckpt.exists():
            return load_checkpoint(ckpt)[:2]
        tc = self.train_config(stage)
        arch = ArchConfig(image_size=self.cfg.dataset.image_size, **self.cfg.diffusion.arch.model_dump())
        table = init_table(base_vocabulary(len(self.cfg.dataset.classes)), arch.embed_dim, self.seed(f"{stage}-table"))
        curve = CurveLog(ckpt.parent / "train_curve.jsonl")
        model = train_denoiser(dataset, table, tc, self.schedule, arch,
                               on_epoch=lambda e, l: curve(epoch=e, loss=l))
        tmp = ckpt.with_suffix(".tmp")
        save_checkpoint(tmp, model, self.schedule, tc.seed, tc.model_dump())
        tmp.replace(ckpt)
        return load_checkpoint(ckpt)[:2]

    def base_checkpoint(self) -> Path:
        return self._dir("base", self.cfg.diffusion.model_dump()) / "model.ckpt"

    def base_model(self):
        if "base" not in self._models:
            self._models["base"] = self._train("train", self.splits.train, self.base_checkpoint())
        return self._models["base"]

    def excluded_model(self, excluded_class: int):
        key = f"excluded-{excluded_class}"
        if key not in self._models:
            ckpt = self._dir(key, self.cfg.diffusion.model_dump()) / "model.ckpt"
            data = self.splits.train.without_class(excluded_class)
            assert excluded_class not in data.labels.tolist()
            self._models[key] = self._train(f"train-{key}", data, ckpt)
        return self._models[key]

    def classifier(self) -> DigitClassifier:
        if "classifier" in self._models:
            return self._models["classifier"]
        cc = self.cfg.classifier.model_copy(update={"seed": self.seed("classifier")})
        path = self._dir("classifier", cc.model_dump()) / "classifier.ckpt"
        if path.exists():
            state, meta = load_state(path)
            clf = DigitClassifier(meta["num_classes"])
            clf.load_state_dict(state)
            clf.eval()
        else:
            clf, acc = train_classifier(self.splits.classifier_train, self.splits.test, cc)
            save_state(path, clf.state_dict(), {"num_classes": clf.num_classes, "heldout_accuracy": acc})
        self._models["classifier"] = clf
        return clf

    # erasure ------------------------------------------------------------

    def method_config(self, method: str, concept: str):
        fam = method_family(method)
        e = self.cfg.erasure
        stage_seed = self.seed(f"erase-{method}-{concept}")
        if fam == "esd":
            return e.esd.model_copy(update={"seed": stage_seed})
        if fam == "uce":
            return e.uce
        if fam == "sa":
            return e.sa.model_copy(update={"seed": stage_seed, "forget_token": concept})
        if fam == "fmn":
            return e.fmn.model_copy(update={"seed": stage_seed, "forget_tokens": [concept],
                                            "prompt_template": prompt_for(concept)})
        if fam == "ac":
            return e.ac.model_copy(update={"seed": stage_seed, "target_token": concept})
        g = self.cfg.guidance
        if fam == "np":
            return {"alpha": g.alpha, "form": g.negative_form}
        if fam == "sld":
            variant = method.split("-", 1)[1] if "-" in method else g.sld_variant
            if variant not in g.sld_variants:
                raise ValueError(f"unknown SLD variant {variant!r}")
            return {"mu": g.mu, "variant": variant, "params": g.sld_variants[variant].model_dump(),
                    "form": g.negative_form}
        raise ValueError(f"unknown erasure method {method!r}")

    def erased(self, concept: str, method: str):
        """``(model, schedule, guidance)`` for an erased concept; weight-free methods reuse the base model."""
        key = f"erased-{method}-{concept}"
        if key in self._models:
            return self._models[key]
        base, sched = self.base_model()
        fam = method_family(method)
        mcfg = self.method_config(method, concept)
        dump = mcfg if isinstance(mcfg, dict) else mcfg.model_dump()
        d = self._dir(f"erase-{method}-{concept.strip('<>')}", self.cfg.diffusion.model_dump(), dump)
        cfg_guidance = GuidanceSpec(mode="cfg", alpha=self.cfg.guidance.alpha)
        if fam in ("np", "sld"):
            if fam == "np":
                spec = make_np_guidance(concept, mcfg["alpha"], model=base, form=mcfg["form"])
            else:
                spec = make_sld_guidance(concept, SldParams(**mcfg["params"]), mcfg["mu"], model=base,
                                         form=mcfg["form"])
            (d / "guidance.json").write_text(spec.model_dump_json(indent=1) + "\n")
            out = (base, sched, spec)
        else:
            ckpt = d / "model.ckpt"
            if not ckpt.exists():
                model = self._erase(fam, base, sched, concept, mcfg, CurveLog(d / "curve.jsonl"))
                save_checkpoint(ckpt, model, sched, getattr(mcfg, "seed", None), dump, {"method": method})
            out = (load_checkpoint(ckpt)[0], sched, cfg_guidance)
        self._models[key] = out
        return out

    def _erase(self, fam, base, sched, concept, mcfg, curve):
        label = token_label(concept)
        train = self.splits.train
        if fam == "esd":
            return erase_esd(base, concept, mcfg, sched, curve)
        if fam == "uce":
            return erase_uce(base, make_uce_edit(base, concept, mcfg))
        if fam == "sa":
            return erase_sa(base, mcfg, train.of_class(mcfg.surrogate_label), train.without_class(label),
                            sched, curve)
        if fam == "fmn":
            return erase_fmn(base, mcfg, train.of_class(label), sched, curve)
        if fam == "ac":
            return erase_ac(base, mcfg, train.of_class(token_label(mcfg.anchor_token)), sched, curve)
        raise ValueError(fam)

    # inversion ----------------------------------------------------------

    def inversion_config(self, attack: str, stage: str):
        return getattr(self.cfg.inversion, attack).model_copy(update={"seed": self.seed(stage)})

    def invert(self, stage: str, model, sched, attack: str, images, spec: GuidanceSpec | None = None,
               concept: str | None = None) -> InversionResult:
        icfg = self.inversion_config(attack, stage)
        d = self._dir(f"invert-{stage.replace('<', '').replace('>', '')}", icfg.model_dump(),
                      parameter_hash(model), model.table.fingerprint(),
                      None if spec is None else spec.model_dump(), concept)
        emb_path = d / "embedding.json"
        if emb_path.exists():
            token, vec = load_embedding(emb_path)
            meta = json.loads((d / "result.json").read_text())
            return InversionResult(vec, token, attack, meta["loss_curve"], meta["config"], meta["source"],
                                   meta["initial_loss"], meta["final_loss"], meta["peak_history"])
        curve = CurveLog(d / "curve.jsonl")
        source = parameter_hash(model)[:16]
        if attack == "ti":
            result = invert_ti(model, images, None, icfg, sched, curve, source)
        elif attack == "np_ci":
            result = invert_np(model, concept, images, None, icfg, sched, spec.alpha, curve, source)
        elif attack == "sld_ci":
            result = invert_sld(model, spec, images, None, icfg, sched, curve, source)
        else:
            raise ValueError(f"unknown attack {attack!r}")
        save_embedding(emb_path, result.token, result.embedding)
        (d / "result.json").write_text(json.dumps({
            "loss_curve": result.loss_curve, "config": result.config, "source": result.source,
            "initial_loss": result.initial_loss, "final_loss": result.final_loss,
            "peak_history": result.peak_history}, indent=1) + "\n")
        token, vec = load_embedding(emb_path)
        result.embedding = vec
        return result

    def attack(self, concept: str, method: str) -> InversionResult:
        model, sched, spec = self.erased(concept, method)
        attack = ATTACK_FOR[method_family(method)]
        images = self.splits.attack.of_class(token_label(concept))
        return self.invert(f"{method}-{concept}", model, sched, attack, images,
                           spec if attack != "ti" else None, concept)

    # evaluation ---------------------------------------------------------

    def _accuracy(self, key: str, model, sched, guidance, tokens, label, table=None, grid_name=None):
        n = self.cfg.eval.n_samples
        seed = self.sample_seed
        d = self._dir("acc", self.cfg.eval.n_samples)
        fp = _hash(key, parameter_hash(model), (table or model.table).fingerprint(False),
                   guidance.model_dump(), tokens, label, n, seed)
        path = d / f"{fp}.json"
        if path.exists():
            return json.loads(path.read_text())["accuracy"], seed
        images, acc = sample_accuracy(model, sched, guidance, tokens, label, self.classifier(), n, seed, table=table)
        if grid_name:
            save_grid(images[: self.cfg.eval.grid_size], self.grid_dir / f"{grid_name}.png")
        path.write_text(json.dumps({"key": key, "accuracy": acc, "n": n, "seed": seed}) + "\n")
        return acc, seed

    @property
    def grid_dir(self) -> Path:
        return self.workdir / "grids"

    def grid_path(self, concept, method, stage) -> str:
        return str(self.grid_dir / f"{concept.strip('<>')}_{method}_{stage}.png")

    def base_accuracy(self, concept: str, guidance: GuidanceSpec | None = None):
        model, sched = self.base_model()
        guidance = guidance or GuidanceSpec(mode="cfg", alpha=self.cfg.guidance.alpha)
        return self._accuracy(f"base-{concept}", model, sched, guidance, prompt_for(concept),
                              token_label(concept), grid_name=f"{concept.strip('<>')}_base_base")

    def stage_accuracy(self, concept: str, method: str, stage: str, prompt_concept: str | None = None):
        """Accuracy for ``concept``'s class at one stage of a (concept, method) cell.

        ``prompt_concept`` lets the erased stage prompt a different class
        (used for the non-target preservation check).
        """
        label = token_label(prompt_concept or concept)
        grid = f"{concept.strip('<>')}_{method}_{stage}"
        if stage == "erased":
            model, sched, spec = self.erased(concept, method)
            return self._accuracy(f"erased-{method}-{concept}-{prompt_concept}", model, sched, spec,
                                  prompt_for(prompt_concept or concept), label,
                                  grid_name=None if prompt_concept else grid)
        result = self.attack(concept, method)
        if stage == "ci":
            model, sched, spec = self.erased(concept, method)
        elif stage == "transfer":
            model, sched = self.base_model()
            spec = GuidanceSpec(mode="cfg", alpha=self.cfg.guidance.alpha)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        table = install_embedding(model.table, result.token, result.embedding)
        return self._accuracy(f"{stage}-{method}-{concept}", model, sched, spec, prompt_for(result.token),
                              label, table=table, grid_name=grid)

    def placeholder_accuracy(self, model, sched, result: InversionResult, label: int, key: str,
                             guidance: GuidanceSpec | None = None) -> float:
        guidance = guidance or GuidanceSpec(mode="cfg", alpha=self.cfg.guidance.alpha)
        table = install_embedding(model.table, result.token, result.embedding)
        acc, _ = self._accuracy(key, model, sched, guidance, prompt_for(result.token), label, table=table,
                                grid_name=key)
        return acc

    def write_resolved_config(self, outdir) -> Path:
        return dump_config(self.cfg, Path(outdir) / "resolved_config.yaml")
