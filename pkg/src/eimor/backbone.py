"""Small vision transformer acting as the frozen foundation model."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import ShapeError, Tensor
from .numerics.init import param, trunc_normal

ADAPTABLE_LINEARS = ("qkv", "proj", "fc1", "fc2")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 32
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.dim, self.layers,
               self.heads, self.mlp_ratio) < 1:
            raise ConfigError("backbone sizes must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("image size not divisible by patch size")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2


@dataclass
class TokenSequence:
    """Batched tokens laid out as ``[CLS | patches | extra]`` along axis 1."""

    tokens: Tensor  # [B, T, d]
    num_extra: int = 0

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


class ViTBackbone:
    """Pre-norm ViT whose parameters never require gradients.

    A final LayerNorm is applied after the last block, so ``Z^L`` is the
    normalized output while intermediate taps are raw residual streams.
    """

    def __init__(self, config: ViTConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = self._init_params() if params is None else params
        expected = set(self._init_shapes())
        if set(self.params) != expected:
            raise ConfigError(f"backbone parameters mismatch: {sorted(set(self.params) ^ expected)}")
        for name, shape in self._init_shapes().items():
            if self.params[name].shape != shape:
                raise ShapeError(f"backbone parameter {name}: {self.params[name].shape} != {shape}")
            self.params[name].requires_grad = False

    def _init_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        d, hidden = c.dim, c.dim * c.mlp_ratio
        shapes = {
            "patch.weight": (c.channels * c.patch_size ** 2, d), "patch.bias": (d,),
            "cls": (d,), "pos": (1 + c.num_patches, d),
        }
        for l in range(c.layers):
            p = f"blocks.{l}."
            shapes.update({
                p + "ln1.weight": (d,), p + "ln1.bias": (d,),
                p + "qkv.weight": (d, 3 * d), p + "qkv.bias": (3 * d,),
                p + "proj.weight": (d, d), p + "proj.bias": (d,),
                p + "ln2.weight": (d,), p + "ln2.bias": (d,),
                p + "fc1.weight": (d, hidden), p + "fc1.bias": (hidden,),
                p + "fc2.weight": (hidden, d), p + "fc2.bias": (d,),
            })
        shapes.update({"norm.weight": (d,), "norm.bias": (d,)})
        return shapes

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self._init_shapes().items():
            if name.endswith("bias"):
                arr = np.zeros(shape)
            elif name == "norm.weight" or ".ln" in name:
                arr = np.ones(shape)
            else:
                arr = trunc_normal(rng, shape)
            params[name] = param(arr, name=name)
        return params

    def linear_layers(self, names=ADAPTABLE_LINEARS):
        """``(layer_id, d_in, d_out)`` for every adaptable linear layer, block-major."""
        out = []
        for l in range(self.config.layers):
            for n in names:
                W = self.params[f"blocks.{l}.{n}.weight"]
                out.append((f"blocks.{l}.{n}", W.shape[0], W.shape[1]))
        return out

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ forward

    def _linear(self, x, layer_id: str, adapters):
        W = self.params[layer_id + ".weight"]
        b = self.params[layer_id + ".bias"]
        adapter = None if adapters is None else adapters.get(layer_id)
        if adapter is None:
            return nx.affine(x, W, b)
        from .mor import mor_linear_forward
        return mor_linear_forward(adapter, W, b, x)

    def block(self, x: Tensor, layer: int, adapters=None) -> Tensor:
        p = self.params
        pre = f"blocks.{layer}."
        h = nx.layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])
        h = nx.self_attention(self._linear(h, pre + "qkv", adapters), self.config.heads)
        x = nx.add(x, self._linear(h, pre + "proj", adapters))
        h = nx.layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
        h = nx.gelu(self._linear(h, pre + "fc1", adapters))
        return nx.add(x, self._linear(h, pre + "fc2", adapters))


def _as_batch(images) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    return arr[None] if arr.ndim == 3 else arr


def patchify_embed(images, backbone: ViTBackbone) -> TokenSequence:
    """Patch projection, prepended CLS and positional embeddings.

    ``images`` is ``[C, H, W]`` or ``[B, C, H, W]``.
    """
    c = backbone.config
    arr = _as_batch(images)
    if arr.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] images, got shape {arr.shape}")
    B, ch, H, W = arr.shape
    if H % c.patch_size or W % c.patch_size:
        raise ShapeError("image size not divisible by patch size")
    if (H, W) != (c.image_size, c.image_size) or ch != c.channels:
        raise ShapeError(f"image {ch}x{H}x{W} does not match backbone {c.channels}x{c.image_size}x{c.image_size}")
    g, ps = c.grid, c.patch_size
    patches = (arr.reshape(B, ch, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
               .reshape(B, g * g, ch * ps * ps).astype(nx.get_dtype(), copy=False))
    p = backbone.params
    emb = nx.affine(Tensor(patches), p["patch.weight"], p["patch.bias"])
    cls = Tensor(np.broadcast_to(p["cls"].data, (B, 1, c.dim)))
    tokens = nx.add(nx.concat([cls, emb], axis=1), p["pos"])
    return TokenSequence(tokens, 0)


def forward_segment(seq: TokenSequence, backbone: ViTBackbone, adapters, from_layer: int,
                    to_layer: int) -> TokenSequence:
    """Run blocks ``[from_layer, to_layer)``; the final norm follows block ``L - 1``."""
    L = backbone.config.layers
    if not 0 <= from_layer <= to_layer <= L:
        raise ConfigError(f"layer segment [{from_layer}, {to_layer}) outside [0, {L}]")
    x = seq.tokens
    for layer in range(from_layer, to_layer):
        x = backbone.block(x, layer, adapters)
    if from_layer < to_layer == L:
        x = nx.layer_norm(x, backbone.params["norm.weight"], backbone.params["norm.bias"])
    return TokenSequence(x, seq.num_extra)


def append_tokens(seq: TokenSequence, extra) -> TokenSequence:
    """Concatenate ``extra`` (``[B, E, d]``, or ``[E, d]`` for a batch of one) after the last token."""
    extra = nx.as_tensor(extra)
    B, _, d = seq.tokens.shape
    if extra.data.ndim == 2:
        if B != 1:
            raise ShapeError(f"unbatched extra tokens {extra.shape} for batch of {B}")
        extra = nx.reshape(extra, (1,) + extra.shape)
    if extra.data.ndim != 3 or extra.shape[0] != B or extra.shape[2] != d:
        raise ShapeError(f"extra tokens {extra.shape} do not fit sequence {seq.tokens.shape}")
    return TokenSequence(nx.concat([seq.tokens, extra], axis=1), seq.num_extra + extra.shape[1])


def extract_cls(seq: TokenSequence) -> Tensor:
    """Token at index 0, ``[B, d]``."""
    return nx.getitem(seq.tokens, (slice(None), 0))


def cls_patch_similarity(seq: TokenSequence, grid: int) -> np.ndarray:
    """Cosine similarity of each patch token to the CLS token, as ``[B, grid, grid]``."""
    tok = seq.tokens.data.astype(np.float64)
    cls, patches = tok[:, :1], tok[:, 1:1 + grid * grid]
    if patches.shape[1] != grid * grid:
        raise ShapeError(f"sequence holds {patches.shape[1]} patches, expected {grid * grid}")
    num = (patches * cls).sum(-1)
    den = np.linalg.norm(patches, axis=-1) * np.linalg.norm(cls, axis=-1)
    sim = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(sim, -1.0, 1.0).reshape(-1, grid, grid)
