"""EITF tensor files, JSON-lines sample manifests and synthetic corpora.

EITF layout (little-endian)::

    b"EITF" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 dims | payload
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"EITF"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
SPLITS = ("train", "val", "test")
TASKS = ("xor", "redundant", "unimodal-linear")


def write_tensor(path, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise FormatError(f"unsupported dtype {arr.dtype} for {path}")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_tensor(path, expect_dtype=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype:
        raise FormatError(f"{path}: dtype {dtype} does not match expected {np.dtype(expect_dtype)}")
    if len(raw) < 8 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    payload = raw[8 + 4 * ndim:]
    want = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(payload) != want:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, dims {dims} need {want}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


# ----------------------------------------------------------------- manifests

@dataclass
class Sample:
    id: str
    tensors: list[np.ndarray]
    label: np.ndarray
    split: str


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries, width = [], None
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        missing = {"id", "tensors", "label", "split"} - set(entry)
        if missing:
            raise DataError(f"{path}:{n}: missing fields {sorted(missing)}")
        if entry["split"] not in SPLITS:
            raise DataError(f"{path}:{n}: unknown split {entry['split']!r}")
        if width is None:
            width = len(entry["label"])
        elif len(entry["label"]) != width:
            raise DataError(f"{path}:{n}: label width {len(entry['label'])} != {width}")
        entries.append(entry)
    return entries


def load_split(manifest, split: str) -> list[Sample]:
    """Samples of one split ordered by id, with their tensors read from disk."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    manifest = Path(manifest)
    root = manifest.parent
    out = []
    for e in sorted((e for e in read_manifest(manifest) if e["split"] == split), key=lambda e: e["id"]):
        tensors = []
        for rel in e["tensors"]:
            p = root / rel
            if not p.exists():
                raise DataError(f"missing tensor file {p}")
            tensors.append(read_tensor(p))
        out.append(Sample(e["id"], tensors, np.asarray(e["label"], dtype=np.float64), split))
    return out


def stack_batch(samples: list[Sample], dtype=np.float32):
    """``(x, y)`` with ``x[m]`` of shape ``[B, C, H, W]`` and ``y`` of shape ``[B, classes]``."""
    M = len(samples[0].tensors)
    x = [np.stack([s.tensors[m] for s in samples]).astype(dtype, copy=False) for m in range(M)]
    y = np.stack([s.label for s in samples]).astype(dtype, copy=False)
    return x, y


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "xor"
    modalities: int = 2
    classes: int = 2
    image_size: int = 16
    train: int = 1000
    val: int = 200
    test: int = 200
    noise: float = 0.3
    seed: int = 0
    block: int = 4

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown synthetic task {self.task!r}; expected one of {TASKS}")
        if self.task == "xor" and (self.modalities, self.classes) != (2, 2):
            raise ConfigError("task: xor requires modalities=2 and classes=2")
        if self.task == "redundant" and not 2 <= self.classes <= 4:
            raise ConfigError("classes: redundant task supports 2 to 4 classes (one per corner)")
        if self.task == "unimodal-linear" and not 2 <= self.classes <= 4:
            raise ConfigError("classes: unimodal-linear task supports 2 to 4 classes")
        if self.modalities < 1 or self.image_size < 2 * self.block:
            raise ConfigError("modalities/image_size too small for the synthetic cue")
        if min(self.train, self.val, self.test) < 0 or self.noise < 0:
            raise ConfigError("split sizes and noise must be non-negative")


def _corner(size: int, block: int, which: int) -> tuple[slice, slice]:
    # 0 top-left, 1 bottom-right, 2 top-right, 3 bottom-left
    lo, hi = slice(0, block), slice(size - block, size)
    return [(lo, lo), (hi, hi), (lo, hi), (hi, lo)][which]


def _render(rng, spec: SyntheticSpec, corner: int | None) -> np.ndarray:
    img = rng.normal(0.0, spec.noise, size=(1, spec.image_size, spec.image_size))
    if corner is not None:
        r, c = _corner(spec.image_size, spec.block, corner)
        img[0, r, c] = 1.0 + rng.normal(0.0, spec.noise, size=(spec.block, spec.block))
    return img.astype(np.float32)


def synth_sample(spec: SyntheticSpec, split_index: int, index: int):
    """Images and label for one sample; independent stream per (seed, split, index)."""
    rng = np.random.default_rng([spec.seed, split_index, index])
    M, C = spec.modalities, spec.classes
    if spec.task == "xor":
        bits = rng.integers(0, 2, size=2)
        label = int(bits[0] ^ bits[1])
        # bit 1 -> top-left block, bit 0 -> bottom-right block
        images = [_render(rng, spec, 0 if b else 1) for b in bits]
    elif spec.task == "redundant":
        label = int(rng.integers(0, C))
        images = [_render(rng, spec, label) for _ in range(M)]
    else:
        label = int(rng.integers(0, C))
        images = [_render(rng, spec, label if m == 0 else None) for m in range(M)]
    return images, np.eye(C)[label]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write tensors and ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for s_idx, (split, n) in enumerate(zip(SPLITS, (spec.train, spec.val, spec.test))):
        for i in range(n):
            sid = f"{split}-{i:05d}"
            images, label = synth_sample(spec, s_idx, i)
            rels = []
            for m, img in enumerate(images):
                rel = f"tensors/{sid}_m{m}.eitf"
                write_tensor(out_dir / rel, img)
                rels.append(rel)
            lines.append(json.dumps({"id": sid, "tensors": rels, "label": label.tolist(), "split": split}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return manifest
