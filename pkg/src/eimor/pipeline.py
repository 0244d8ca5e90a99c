"""End-to-end run steps shared by the CLI and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

from .backbone import ViTBackbone
from .config import RunConfig
from .data import Sample, load_split
from .ei import (
    EIModel, FitResult, ModalityPrior, UnimodalModel, compute_modality_prior, fit, new_unimodal,
    pretrain_unimodal,
)
from .errors import ConfigError


def load_corpus(cfg: RunConfig, manifest=None) -> dict[str, list[Sample]]:
    manifest = manifest or cfg["data.manifest"]
    if not manifest:
        raise ConfigError("data.manifest is not set (use --manifest or the config file)")
    return {s: load_split(manifest, s) for s in ("train", "val", "test")}


def pretrain_all(cfg: RunConfig, backbone: ViTBackbone, train: list[Sample]) -> list[UnimodalModel]:
    """One pre-adapted unimodal model per modality."""
    return [pretrain_unimodal(backbone, train, m, cfg["ei.classes"], cfg["ei.adapter_mode"], cfg["ei.ranks"],
                              cfg["train.pretrain_epochs"], cfg.train(), cfg["ei.seed"] + 17 * m,
                              cfg["ei.multilabel"])
            for m in range(cfg["ei.modalities"])]


def build_ei(cfg: RunConfig, backbone: ViTBackbone, unimodals: list[UnimodalModel] | None,
             no_int: bool = False) -> EIModel:
    L = backbone.config.layers
    model = EIModel(backbone, cfg["ei.modalities"], cfg["ei.classes"], cfg["ei.adapter_mode"], cfg["ei.ranks"],
                    cfg["ei.acquire_layer"], L if no_int else cfg["ei.insert_layer"], cfg["ei.seed"],
                    cfg["ei.multilabel"])
    for m, uni in enumerate(unimodals or []):
        model.load_adapters(m, uni.adapters, uni.head)
    return model


def scratch_prior(cfg: RunConfig, backbone: ViTBackbone, train: list[Sample]) -> ModalityPrior:
    """Prior from a single evaluation pass of freshly initialized unimodal models."""
    fresh = [new_unimodal(backbone, cfg["ei.classes"], cfg["ei.adapter_mode"], cfg["ei.ranks"],
                          cfg["ei.seed"] + 17 * m, cfg["ei.multilabel"])
             for m in range(cfg["ei.modalities"])]
    return compute_modality_prior(fresh, train)


@dataclass
class TrainedRun:
    model: EIModel
    prior: ModalityPrior
    fit: FitResult
    unimodals: list[UnimodalModel] | None


def train_run(cfg: RunConfig, corpus: dict[str, list[Sample]], no_int: bool = False,
              from_scratch: bool = False, unimodals: list[UnimodalModel] | None = None,
              on_epoch=None) -> TrainedRun:
    """Pre-adapt (unless ``from_scratch``), set the modality prior, then train EI."""
    backbone = ViTBackbone(cfg.vit())
    if unimodals is not None:
        backbone = unimodals[0].backbone
    train = corpus["train"]
    if from_scratch:
        unimodals, prior = None, scratch_prior(cfg, backbone, train)
    else:
        if unimodals is None:
            unimodals = pretrain_all(cfg, backbone, train)
        prior = compute_modality_prior(unimodals, train)
    model = build_ei(cfg, backbone, unimodals, no_int)
    result = fit(model, train, corpus["val"], prior, cfg.weights(), cfg.train(), on_epoch)
    return TrainedRun(model, prior, result, unimodals)
