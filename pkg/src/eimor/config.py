"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from pathlib import Path

from .backbone import ViTConfig
from .data import SyntheticSpec
from .ei import LossWeights, TrainConfig
from .errors import ConfigError
from .mor import MODES

# key -> default; the default's type drives parsing ("ranks" is a rank tuple,
# "acquire_layer" may be left empty for "last layer")
DEFAULTS: dict[str, object] = {
    "backbone.image_size": 16,
    "backbone.patch_size": 4,
    "backbone.channels": 1,
    "backbone.dim": 32,
    "backbone.layers": 4,
    "backbone.heads": 4,
    "backbone.mlp_ratio": 4,
    "backbone.seed": 0,
    "ei.modalities": 2,
    "ei.classes": 2,
    "ei.acquire_layer": None,
    "ei.insert_layer": 0,
    "ei.adapter_mode": "mor",
    "ei.ranks": None,
    "ei.lambda1": 0.3,
    "ei.lambda2": 0.1,
    "ei.multilabel": False,
    "ei.seed": 0,
    "train.batch_size": 8,
    "train.max_epochs": 30,
    "train.patience": 10,
    "train.lr_min": 1e-5,
    "train.lr_max": 1e-3,
    "train.momentum": 0.95,
    "train.weight_decay": 1e-4,
    "train.warmup_frac": 0.05,
    "train.seed": 0,
    "train.pretrain_epochs": 10,
    "data.manifest": "",
    "data.task": "xor",
    "data.train": 1000,
    "data.val": 200,
    "data.test": 200,
    "data.noise": 0.3,
    "data.seed": 0,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if key == "ei.ranks":
            return None if raw in ("", "default") else tuple(int(r) for r in raw.replace(",", " ").split())
        if key == "ei.acquire_layer":
            return None if raw in ("", "L", "last") else int(raw)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = cls()
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, raw)
        return cfg

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, value) if isinstance(value, str) else value
        if key == "ei.adapter_mode" and self.values[key] not in MODES:
            raise ConfigError(f"ei.adapter_mode: unknown mode {self.values[key]!r}; expected one of {MODES}")

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        lines = []
        for k in DEFAULTS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(r) for r in v)
            elif v is None:
                v = ""
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}

    def write(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.txt").write_text(self.to_text(), encoding="utf-8")

    # typed views
    def vit(self) -> ViTConfig:
        v = self.values
        try:
            return ViTConfig(v["backbone.image_size"], v["backbone.patch_size"], v["backbone.channels"],
                             v["backbone.dim"], v["backbone.layers"], v["backbone.heads"],
                             v["backbone.mlp_ratio"], v["backbone.seed"])
        except ConfigError as exc:
            raise ConfigError(f"backbone: {exc}") from exc

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.batch_size"], v["train.max_epochs"], v["train.patience"],
                           v["train.lr_min"], v["train.lr_max"], v["train.momentum"],
                           v["train.weight_decay"], v["train.warmup_frac"], v["train.seed"])

    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.values["ei.lambda1"], self.values["ei.lambda2"])
        except ConfigError as exc:
            raise ConfigError(f"ei.lambda1/ei.lambda2: {exc}") from exc

    def synthetic(self) -> SyntheticSpec:
        v = self.values
        spec = SyntheticSpec(v["data.task"], v["ei.modalities"], v["ei.classes"], v["backbone.image_size"],
                             v["data.train"], v["data.val"], v["data.test"], v["data.noise"], v["data.seed"])
        spec.validate()
        return spec
