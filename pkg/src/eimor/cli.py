"""``eimor`` command line: generate, pretrain, train, eval, gradcheck, ablate, simmap."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import ViTBackbone, cls_patch_similarity
from .checkpoint import load_ei, load_unimodal, save_ei, save_unimodal
from .config import RunConfig
from .data import generate_synthetic, load_split, stack_batch
from .ei import (
    EIModel, ModalityPrior, compute_losses, evaluate_model, generate_int_tokens, primary_sequence,
)
from .errors import ConfigError, DataError
from .mor import MODES
from .numerics import NumericError, gradcheck
from .numerics.tensor import inject_backward_fault
from .pipeline import build_ei, load_corpus, pretrain_all, train_run

log = logging.getLogger("eimor")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if getattr(args, "seed", None) is not None:
        for k in ("backbone.seed", "ei.seed", "train.seed", "data.seed"):
            cfg.set(k, args.seed)
    if getattr(args, "mode", None):
        cfg.set("ei.adapter_mode", args.mode)
    if getattr(args, "manifest", None):
        cfg.set("data.manifest", args.manifest)
    return cfg


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    manifest = generate_synthetic(cfg.synthetic(), out)
    cfg.set("data.manifest", str(manifest))
    cfg.write(out)
    print(manifest)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    corpus = load_corpus(cfg)
    cfg.write(out)
    backbone = ViTBackbone(cfg.vit())
    unimodals = pretrain_all(cfg, backbone, corpus["train"])
    scores = []
    for m, uni in enumerate(unimodals):
        save_unimodal(uni, out / f"modality_{m}", {"modality": m})
        view = [type(s)(s.id, [s.tensors[m]], s.label, s.split) for s in corpus["train"]]
        scores.append(evaluate_model(uni, view).macro["map"])
    prior = ModalityPrior.from_scores(scores)
    _write_json(out / "prior.json", {"pi": prior.pi.tolist(), "train_map": scores})
    print(json.dumps({"train_map": scores, "pi": prior.pi.tolist()}))
    return EXIT_OK


def _load_pretrained(path, cfg: RunConfig):
    root = Path(path)
    unimodals = []
    for m in range(cfg["ei.modalities"]):
        backbone = unimodals[0].backbone if unimodals else None
        uni, _ = load_unimodal(root / f"modality_{m}", backbone)
        unimodals.append(uni)
    if unimodals[0].backbone.parameter_hash() != ViTBackbone(cfg.vit()).parameter_hash():
        raise ConfigError(f"{root}: pretrained backbone does not match backbone.* settings")
    return unimodals


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    if not args.from_scratch and not args.pretrained:
        raise ConfigError("train needs --pretrained DIR (output of `pretrain`) or --from-scratch")
    corpus = load_corpus(cfg)
    if args.no_int:
        cfg.set("ei.insert_layer", cfg["backbone.layers"])
    cfg.write(out)
    unimodals = None if args.from_scratch else _load_pretrained(args.pretrained, cfg)
    lines = []

    def on_epoch(stats):
        row = {"epoch": stats.epoch, "steps": stats.steps, "lr": stats.lr, **stats.losses, "val_map": stats.val_map}
        lines.append(json.dumps(row))
        log.info("epoch %d  L_total %.4f  val mAP %.4f", stats.epoch, stats.losses["L_total"], stats.val_map)

    run = train_run(cfg, corpus, no_int=args.no_int, from_scratch=args.from_scratch, unimodals=unimodals,
                    on_epoch=on_epoch)
    (out / "train_log.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    save_ei(run.model, out / "checkpoint", {"prior": run.prior.pi.tolist(), "lambda1": cfg["ei.lambda1"],
                                            "lambda2": cfg["ei.lambda2"]})
    (out / "checkpoint" / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    report = {
        "best_epoch": run.fit.best_epoch,
        "best_val_map": run.fit.best_val_map,
        "epochs_run": len(run.fit.history),
        "stopped_early": run.fit.stopped_early,
        "prior": run.prior.pi.tolist(),
        args.split: evaluate_model(run.model, corpus[args.split]).to_dict(),
    }
    _write_json(out / "metrics.json", report)
    print(json.dumps({"best_epoch": report["best_epoch"], f"{args.split}_map": report[args.split]["macro"]["map"]}))
    return EXIT_OK


def _checkpoint_config(ckpt: Path) -> RunConfig:
    path = ckpt / "config.txt"
    return RunConfig.from_file(path) if path.exists() else RunConfig()


def cmd_eval(args) -> int:
    out = _out_dir(args)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        model, _ = load_ei(ckpt)
        cfg = _checkpoint_config(ckpt)
        if args.manifest:
            cfg.set("data.manifest", args.manifest)
    elif args.untrained:
        cfg = load_config(args)
        model = build_ei(cfg, ViTBackbone(cfg.vit()), None, args.no_int)
    else:
        raise ConfigError("eval needs --checkpoint DIR or --untrained")
    samples = load_split(_manifest(cfg), args.split)
    cfg.write(out)
    report = evaluate_model(model, samples)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps(report.macro))
    return EXIT_OK


def _manifest(cfg: RunConfig) -> str:
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is not set (use --manifest or the config file)")
    return cfg["data.manifest"]


# ---------------------------------------------------------------- gradcheck

MICRO = {"backbone.image_size": 8, "backbone.patch_size": 4, "backbone.dim": 16, "backbone.layers": 2,
         "backbone.heads": 2, "backbone.mlp_ratio": 2, "ei.modalities": 2, "ei.classes": 2}


def micro_config(cfg: RunConfig | None = None) -> RunConfig:
    """Micro profile for gradient checks; other keys keep their configured values."""
    cfg = cfg or RunConfig()
    for k, v in MICRO.items():
        cfg.set(k, v)
    return cfg


def run_gradcheck(cfg: RunConfig, seed: int = 0, samples: int = 4, fault: str | None = None):
    """Gradcheck ``L_total`` of a perturbed micro EI model on a random batch of 2 (64-bit)."""
    with nx.precision("float64"):
        model = build_ei(cfg, ViTBackbone(cfg.vit()), None)
        rng = np.random.default_rng([seed, 99])
        params = model.trainable_parameters()
        # move B and routers off zero so every path carries gradient
        for p in params.values():
            p.data = p.data + rng.normal(0.0, 0.05, p.shape)
        vc = model.backbone.config
        x = [nx.Tensor(rng.normal(0, 1, (2, vc.channels, vc.image_size, vc.image_size)))
             for _ in range(model.M)]
        y = np.eye(model.C)[rng.integers(0, model.C, size=2)]
        prior = ModalityPrior(np.eye(model.M)[0], [1.0] + [0.0] * (model.M - 1))
        weights = cfg.weights()
        f = lambda: compute_losses(model, x, y, prior, weights).L_total
        check = lambda: gradcheck(f, params, eps=1e-3, samples=samples, seed=seed, order=4)
        if fault:
            with inject_backward_fault(fault, 1.5):
                return check()
        return check()


def cmd_gradcheck(args) -> int:
    cfg = micro_config(load_config(args))
    t0 = time.time()
    if args.samples < 1:
        raise ConfigError("--samples must be at least 1")
    report = run_gradcheck(cfg, seed=cfg["ei.seed"], samples=args.samples, fault=args.fault)
    elapsed = time.time() - t0
    summary = {"passed": report.passed, "max_rel_err": report.max_rel_err, "worst_param": report.worst_param,
               "worst_index": report.worst_index, "tol": report.tol, "checked": report.checked,
               "seconds": round(elapsed, 2)}
    if args.out:
        cfg.write(args.out)
        _write_json(Path(args.out) / "gradcheck.json", summary)
    print(f"max_rel_err {report.max_rel_err:.3e} over {report.checked} coordinates ({elapsed:.1f}s)")
    if not report.passed:
        print(f"FAIL worst parameter {report.worst_param} at {report.worst_index}", file=sys.stderr)
        for line in report.failures[:5]:
            print(f"  {line}", file=sys.stderr)
        return EXIT_NUMERIC
    print("PASS")
    return EXIT_OK


# ------------------------------------------------------------------- ablate

def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from exc


def run_ablation(cfg: RunConfig, corpus, acquire: list[int], insert: list[int], split: str = "test") -> dict:
    L = cfg["backbone.layers"]
    for a in acquire:
        if not 1 <= a <= L:
            raise ConfigError(f"acquire layer {a} outside [1, {L}]")
    for j in insert:
        if not 0 <= j <= L:
            raise ConfigError(f"insert layer {j} outside [0, {L}]")
    # every cell starts from the same pre-adapted sets and seed
    unimodals = pretrain_all(cfg, ViTBackbone(cfg.vit()), corpus["train"])
    cells = []
    for a in acquire:
        for j in insert:
            cell = RunConfig(cfg.values)
            cell.set("ei.acquire_layer", a)
            cell.set("ei.insert_layer", j)
            run = train_run(cell, corpus, unimodals=unimodals)
            cells.append({"acquire": a, "insert": j, "best_epoch": run.fit.best_epoch,
                          "report": evaluate_model(run.model, corpus[split]).to_dict(),
                          "config": cell.to_dict()})
    return {"split": split, "layers": L, "cells": cells}


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    L = cfg["backbone.layers"]
    acquire = _int_list(args.acquire, "--acquire") if args.acquire else list(range(1, L + 1))
    insert = _int_list(args.insert, "--insert") if args.insert else list(range(0, L + 1))
    corpus = load_corpus(cfg)
    cfg.write(out)
    table = run_ablation(cfg, corpus, acquire, insert, args.split)
    _write_json(out / "ablation.json", table)
    for c in table["cells"]:
        print(f"acquire={c['acquire']} insert={c['insert']} mAP={c['report']['macro']['map']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- simmap

def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM of a similarity map in [-1, 1]; gray = round((v+1)/2*255)."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    gray = np.round((v + 1.0) / 2.0 * 255.0).astype(np.uint8)
    h, w = gray.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def similarity_map(model: EIModel, sample, modality: int, with_int: bool) -> np.ndarray:
    if not 0 <= modality < model.M:
        raise ConfigError(f"--modality {modality} outside [0, {model.M})")
    x, _ = stack_batch([sample], nx.get_dtype())
    with nx.no_tape():
        ints = generate_int_tokens(model, x, modality)[0] if with_int and model.uses_int else None
        seq = primary_sequence(model, x, modality, ints)
    return cls_patch_similarity(seq, model.backbone.config.grid)[0]


def cmd_simmap(args) -> int:
    if not args.checkpoint:
        raise ConfigError("simmap needs --checkpoint DIR")
    if args.sample is None:
        raise ConfigError("simmap needs --sample ID")
    ckpt = Path(args.checkpoint)
    model, _ = load_ei(ckpt)
    cfg = _checkpoint_config(ckpt)
    if args.manifest:
        cfg.set("data.manifest", args.manifest)
    samples = {s.id: s for s in load_split(_manifest(cfg), args.split)}
    if args.sample not in samples:
        raise DataError(f"sample {args.sample!r} not found in split {args.split!r}")
    out = Path(args.out) if args.out else None
    if out is None:
        raise ConfigError("--out is required")
    sim = similarity_map(model, samples[args.sample], args.modality, not args.no_int)
    write_pgm(out, sim)
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eimor", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="overrides backbone/ei/train/data seeds")
        if out:
            p.add_argument("--out", help="output directory (or file for simmap)")
        return p

    common(sub.add_parser("generate", help="write a synthetic corpus"))
    p = common(sub.add_parser("pretrain", help="unimodal pre-adaptation per modality"))
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p = common(sub.add_parser("train", help="train the EI model"))
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--pretrained", help="output directory of `pretrain`")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--no-int", action="store_true", help="never insert INT tokens")
    p.add_argument("--split", default="test", help="split reported in metrics.json")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a split"))
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true", help="evaluate a freshly initialized model")
    p.add_argument("--no-int", action="store_true")
    p.add_argument("--split", default="test")
    p = common(sub.add_parser("gradcheck", help="finite-difference check of the micro EI model"))
    p.add_argument("--samples", type=int, default=4, help="coordinates probed per tensor (default 4)")
    p.add_argument("--fault", help=argparse.SUPPRESS)
    p = common(sub.add_parser("ablate", help="acquire x insert layer grid"))
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--acquire", help="comma-separated acquire layers (default 1..L)")
    p.add_argument("--insert", help="comma-separated insert layers (default 0..L)")
    p.add_argument("--split", default="test")
    p = sub.add_parser("simmap", help="patch-to-CLS similarity map as PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--sample")
    p.add_argument("--modality", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--no-int", action="store_true")
    p.add_argument("--out", help="output .pgm path")
    return parser


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "simmap": cmd_simmap}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
