"""Command line entry point.

Every command reads one YAML config, reuses cached artifacts under
``<output_dir>/cache`` and writes its outputs, plus the resolved config,
to ``<output_dir>/<command>[-<arguments>]-<config digest>/``.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from .classifier import accuracy
from .conditioning import encode_prompt, load_embedding, prompt_for, save_embedding, token_label
from .config import ConfigError, RunConfig, load_config, parse_config
from .diffusion import sample as draw
from .evaluation import EvalReport, full_matrix, run_exclusion_study, sample_accuracy
from .guidance import GuidanceSpec
from .inversion import install_embedding
from .pipeline import ATTACK_FOR, Experiment, method_family, save_grid
from .plots import emit_plots

log = logging.getLogger("concept_inversion")

ATTACKS = {"ti": "ti", "np-ci": "np_ci", "sld-ci": "sld_ci"}


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.output_dir:
        cfg = cfg.model_copy(update={"output_dir": args.output_dir})
    return cfg


def _run_tag(args) -> str:
    parts = [args.command]
    for key in ("what", "method", "attack", "concept", "token", "cls"):
        value = getattr(args, key, None)
        if value is not None:
            parts.append(str(value).strip("<>"))
    return "-".join(parts)


def _run_dir(cfg: RunConfig, tag: str) -> Path:
    out = Path(cfg.output_dir) / f"{tag}-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(cfg: RunConfig) -> Experiment:
    return Experiment(cfg, Path(cfg.output_dir) / "cache")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_train(args, cfg, exp, out):
    if args.what == "denoiser":
        exp.base_model()
        shutil.copyfile(exp.base_checkpoint(), out / "model.ckpt")
        curve = exp.base_checkpoint().parent / "train_curve.jsonl"
        if curve.exists():
            shutil.copyfile(curve, out / "train_curve.jsonl")
        print(out / "model.ckpt")
    else:
        clf = exp.classifier()
        acc = accuracy(clf, exp.splits.test)
        _write_json(out / "classifier.json", {"heldout_accuracy": acc})
        print(f"held-out accuracy {acc:.4f}")


def cmd_erase(args, cfg, exp, out):
    model, _, spec = exp.erased(args.concept, args.method)
    if method_family(args.method) in ("np", "sld"):
        (out / "guidance.json").write_text(spec.model_dump_json(indent=1) + "\n")
        print(out / "guidance.json")
    else:
        save_checkpoint(out / "model.ckpt", model, exp.schedule, extra={"method": args.method,
                                                                          "concept": args.concept})
        print(out / "model.ckpt")


def cmd_invert(args, cfg, exp, out):
    concept = args.concept
    label = token_label(concept)
    images = exp.splits.attack.of_class(label)
    if args.checkpoint:
        model, sched, _ = load_checkpoint(args.checkpoint)
        attack = ATTACKS[args.attack or "ti"]
        if attack != "ti":
            raise CliError("--checkpoint only supports the ti attack; use --method for guided erasures")
        result = exp.invert(f"ckpt-{parameter_hash(model)[:12]}-{concept}", model, sched, "ti", images)
    else:
        attack = ATTACKS[args.attack] if args.attack else ATTACK_FOR[method_family(args.method)]
        model, sched, spec = exp.erased(concept, args.method)
        if attack != "ti" and spec.mode not in ("negative_prompt", "sld"):
            raise CliError(f"attack {args.attack} needs a guidance-based erasure, got {args.method}")
        if attack == "np_ci" and spec.mode != "negative_prompt" or attack == "sld_ci" and spec.mode != "sld":
            raise CliError(f"attack {args.attack} does not match method {args.method}")
        result = exp.invert(f"{args.method}-{concept}-{attack}", model, sched, attack, images,
                            None if attack == "ti" else spec, concept)
    save_embedding(out / "embedding.json", result.token, result.embedding)
    _write_json(out / "inversion.json", {"attack": result.attack, "token": result.token, "source": result.source,
                                         "initial_loss": result.initial_loss, "final_loss": result.final_loss,
                                         "loss_curve": result.loss_curve})
    print(out / "embedding.json")


def cmd_sample(args, cfg, exp, out):
    if args.checkpoint:
        model, sched, _ = load_checkpoint(args.checkpoint)
        spec = GuidanceSpec(mode="cfg", alpha=cfg.guidance.alpha)
    elif args.method:
        model, sched, spec = exp.erased(args.erase_concept or args.token, args.method)
    else:
        model, sched = exp.base_model()
        spec = GuidanceSpec(mode="cfg", alpha=cfg.guidance.alpha)
    table = model.table
    token = args.token
    if args.embedding:
        token, vec = load_embedding(args.embedding)
        table = install_embedding(table, token, vec)
    if token not in table:
        raise CliError(f"unknown token {token!r}")
    seed = exp.seed("sample") if args.seed is None else args.seed
    label = args.label if args.label is not None else token_label(args.token)
    if label is None:
        images = draw(model, sched, spec, encode_prompt(prompt_for(token), table), seed, n=args.n, table=table)
        summary = {"n": args.n, "seed": seed}
    else:
        images, acc = sample_accuracy(model, sched, spec, prompt_for(token), label, exp.classifier(), args.n, seed,
                                      table=table)
        summary = {"n": args.n, "seed": seed, "label": label, "accuracy": acc}
        print(f"accuracy {acc:.4f}")
    save_grid(images, out / "samples.png")
    torch.save(images, out / "samples.pt")
    _write_json(out / "samples.json", summary)


def cmd_evaluate(args, cfg, exp, out):
    concepts = [args.concept] if args.concept else None
    methods = args.methods.split(",") if args.methods else None
    report = full_matrix(exp, concepts, methods)
    report.save(out / "report.json")
    (out / "report.md").write_text(report.to_markdown())
    emit_plots(report, out / "plots")
    print(report.to_markdown())


def cmd_report(args, cfg, exp, out):
    if args.report:
        path = Path(args.report)
    else:
        found = sorted(Path(cfg.output_dir).glob(f"evaluate*-{cfg.digest()}/report.json"))
        if not found:
            raise CliError(f"no evaluate report for this config under {cfg.output_dir}; pass --report")
        path = found[-1]
    if not path.exists():
        raise CliError(f"report not found: {path}")
    report = EvalReport.load(path)
    (out / "report.md").write_text(report.to_markdown())
    for p in emit_plots(report, out / "plots"):
        print(p)
    print(report.to_markdown())


def cmd_exclusion(args, cfg, exp, out):
    cls = cfg.eval.exclusion_class if args.cls is None else args.cls
    result = run_exclusion_study(exp, cls)
    _write_json(out / "exclusion.json", {"class": cls, **result})
    print(json.dumps(result))


COMMANDS = {"train": cmd_train, "erase": cmd_erase, "invert": cmd_invert, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "report": cmd_report, "exclusion-study": cmd_exclusion}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults if omitted)")
    common.add_argument("--output-dir", help="override the config's output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="concept-inversion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the denoiser or the judge classifier")
    p.add_argument("what", choices=["denoiser", "classifier"])

    p = sub.add_parser("erase", parents=[common], help="erase a concept (NP/SLD write a guidance spec)")
    p.add_argument("--method", required=True)
    p.add_argument("--concept", default="<digit-3>")

    p = sub.add_parser("invert", parents=[common], help="learn a placeholder embedding against an erased model")
    p.add_argument("--attack", choices=sorted(ATTACKS))
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--method")
    target.add_argument("--checkpoint")
    p.add_argument("--concept", default="<digit-3>")

    p = sub.add_parser("sample", parents=[common], help="sample a grid and score it")
    p.add_argument("--token", default="<digit-3>")
    p.add_argument("--embedding", help="embedding JSON to install before sampling")
    p.add_argument("--label", type=int, help="class to score against (default: the token's class)")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--method", help="sample from this erasure of --erase-concept")
    source.add_argument("--checkpoint")
    p.add_argument("--erase-concept")
    p.add_argument("-n", type=int, default=64)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="erased / CI / transfer accuracies for every cell")
    p.add_argument("--concept")
    p.add_argument("--methods", help="comma-separated subset of methods")

    p = sub.add_parser("report", parents=[common], help="render markdown and plots from a saved report")
    p.add_argument("--report")

    p = sub.add_parser("exclusion-study", parents=[common], help="TI recovery on full vs class-excluded model")
    p.add_argument("--class", dest="cls", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        exp = _experiment(cfg)
        out = _run_dir(cfg, _run_tag(args))
        exp.write_resolved_config(out)
        COMMANDS[args.command](args, cfg, exp, out)
    except (ConfigError, CliError, FileNotFoundError, KeyError, ValueError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
