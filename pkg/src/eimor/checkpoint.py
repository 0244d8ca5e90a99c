"""Directory checkpoints: one EITF file per tensor plus ``manifest.json``."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .backbone import ViTBackbone, ViTConfig
from .data import read_tensor, write_tensor
from .ei import EIModel, UnimodalModel, new_unimodal
from .errors import DataError
from .numerics import Tensor
from .numerics.init import param

FORMAT = "eimor-checkpoint"


def _dump(root: Path, subdir: str, tensors: dict[str, Tensor]) -> dict[str, str]:
    (root / subdir).mkdir(parents=True, exist_ok=True)
    index = {}
    for name, t in tensors.items():
        rel = f"{subdir}/{name}.eitf"
        write_tensor(root / rel, t.data)
        index[name] = rel
    return index


def _read_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"checkpoint manifest not found: {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT:
        raise DataError(f"{path}: not an {FORMAT}")
    return meta


def _load_backbone(root: Path, meta: dict) -> ViTBackbone:
    params = {name: param(read_tensor(root / rel), name=name) for name, rel in meta["backbone_tensors"].items()}
    return ViTBackbone(ViTConfig(**meta["backbone"]), params)


def _assign(root: Path, index: dict[str, str], params: dict[str, Tensor]) -> None:
    if set(index) != set(params):
        raise DataError(f"checkpoint tensors do not match model: {sorted(set(index) ^ set(params))[:5]}")
    for name, rel in index.items():
        arr = read_tensor(root / rel)
        if arr.shape != params[name].shape:
            raise DataError(f"{rel}: shape {arr.shape} != {params[name].shape}")
        params[name].data = arr.astype(params[name].data.dtype)


def _adapter_manifest(prefix: str, adapter_set) -> list[dict]:
    return [{"set": prefix, "layer": lid, "mode": a.mode, "ranks": list(a.ranks)} for lid, a in adapter_set]


def save_ei(model: EIModel, out_dir, extra: dict | None = None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    params = model.trainable_parameters()
    adapters = {k: v for k, v in params.items() if k.startswith(("aux.", "primary."))}
    rest = {k: v for k, v in params.items() if k not in adapters}
    layers = [lid for lid, _ in model.aux_adapters[0]]
    meta = {
        "format": FORMAT, "kind": "ei", "version": 1,
        "M": model.M, "C": model.C, "acquire_layer": model.acquire_layer,
        "insert_layer": model.insert_layer, "mode": model.mode,
        "ranks": list(model.aux_adapters[0].ranks), "seed": model.seed,
        "multilabel": model.multilabel,
        "adapted_layers": sorted({lid.split(".")[-1] for lid in layers},
                                 key=lambda n: ["qkv", "proj", "fc1", "fc2"].index(n)),
        "backbone": asdict(model.backbone.config),
        "adapters": [e for i in range(model.M) for e in _adapter_manifest(f"aux.{i}", model.aux_adapters[i])]
        + [e for i in range(model.M) for e in _adapter_manifest(f"primary.{i}", model.primary_adapters[i])],
        "backbone_tensors": _dump(root, "backbone", model.backbone.params),
        "adapter_tensors": _dump(root, "adapters", adapters),
        "head_tensors": _dump(root, "heads", rest),
    }
    meta.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return root


def load_ei(ckpt_dir) -> tuple[EIModel, dict]:
    root = Path(ckpt_dir)
    meta = _read_manifest(root)
    if meta.get("kind") != "ei":
        raise DataError(f"{root}: not an EI checkpoint")
    backbone = _load_backbone(root, meta)
    model = EIModel(backbone, meta["M"], meta["C"], meta["mode"], tuple(meta["ranks"]) or None,
                    meta["acquire_layer"], meta["insert_layer"], meta["seed"], meta["multilabel"],
                    tuple(meta["adapted_layers"]))
    _assign(root, {**meta["adapter_tensors"], **meta["head_tensors"]}, model.trainable_parameters())
    return model, meta


def save_unimodal(model: UnimodalModel, out_dir, extra: dict | None = None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT, "kind": "unimodal", "version": 1,
        "mode": model.adapters.mode, "ranks": list(model.adapters.ranks),
        "classes": model.head["weight"].shape[1], "multilabel": model.multilabel,
        "backbone": asdict(model.backbone.config),
        "adapters": _adapter_manifest("unimodal", model.adapters),
        "backbone_tensors": _dump(root, "backbone", model.backbone.params),
        "adapter_tensors": _dump(root, "adapters", model.trainable_parameters()),
    }
    meta.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return root


def load_unimodal(ckpt_dir, backbone: ViTBackbone | None = None) -> tuple[UnimodalModel, dict]:
    root = Path(ckpt_dir)
    meta = _read_manifest(root)
    if meta.get("kind") != "unimodal":
        raise DataError(f"{root}: not a unimodal checkpoint")
    if backbone is None:
        backbone = _load_backbone(root, meta)
    layers = tuple(dict.fromkeys(e["layer"].split(".")[-1] for e in meta["adapters"]))
    model = new_unimodal(backbone, meta["classes"], meta["mode"], tuple(meta["ranks"]) or None,
                         multilabel=meta["multilabel"], adapted_layers=layers)
    _assign(root, meta["adapter_tensors"], model.trainable_parameters())
    return model, meta
