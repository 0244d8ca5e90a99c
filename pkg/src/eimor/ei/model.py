"""Early-intervention multimodal classifier built on a shared frozen backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..backbone import (
    ADAPTABLE_LINEARS, TokenSequence, ViTBackbone, append_tokens, extract_cls, forward_segment, patchify_embed,
)
from ..errors import ConfigError
from ..mor import AdapterSet, init_adapter_set
from ..numerics import Tensor
from ..numerics.init import param, trunc_normal


@dataclass
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class ModalityPrior:
    """One-hot marker of the best modality on the training set."""

    pi: np.ndarray
    source_scores: list[float]

    @classmethod
    def from_scores(cls, scores) -> "ModalityPrior":
        scores = [float(s) for s in scores]
        if not scores:
            raise ConfigError("modality prior needs at least one score")
        pi = np.zeros(len(scores))
        pi[int(np.argmax(scores))] = 1.0  # argmax keeps the lowest index on ties
        return cls(pi, scores)


def _linear_params(rng, d_in, d_out, requires_grad=True):
    return {"weight": param(trunc_normal(rng, (d_in, d_out)), requires_grad),
            "bias": param(np.zeros(d_out), requires_grad)}


class EIModel:
    """Per-modality auxiliary/primary adapter sets, INT adapters, heads and gating.

    Modalities are indexed from 0. ``acquire_layer`` (1..L) is the depth at
    which reference CLS tokens are read for INT generation; ``insert_layer``
    (0..L) is where INT tokens join the target sequence, ``L`` meaning never.
    """

    def __init__(self, backbone: ViTBackbone, num_modalities: int, num_classes: int,
                 mode: str = "mor", ranks=None, acquire_layer: int | None = None,
                 insert_layer: int = 0, seed: int = 0, multilabel: bool = False,
                 adapted_layers=ADAPTABLE_LINEARS):
        L = backbone.config.layers
        acquire_layer = L if acquire_layer is None else acquire_layer
        if num_modalities < 2:
            raise ConfigError("EI needs at least two modalities")
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        if not 1 <= acquire_layer <= L:
            raise ConfigError(f"acquire_layer {acquire_layer} outside [1, {L}]")
        if not 0 <= insert_layer <= L:
            raise ConfigError(f"insert_layer {insert_layer} outside [0, {L}]")
        self.backbone = backbone
        self.M, self.C = num_modalities, num_classes
        self.mode = mode
        self.acquire_layer, self.insert_layer = acquire_layer, insert_layer
        self.multilabel = multilabel
        self.seed = seed

        d, M = backbone.config.dim, num_modalities
        # adapter seeds and the rest are drawn from separate streams, so the
        # heads/gating do not depend on the adapter mode
        adapter_seeds = np.random.SeedSequence([seed, 1]).generate_state(2 * M)
        rng = np.random.default_rng([seed, 2])
        self.aux_adapters: list[AdapterSet] = [
            init_adapter_set(backbone, mode, ranks, int(adapter_seeds[i]), adapted_layers) for i in range(M)]
        self.primary_adapters: list[AdapterSet] = [
            init_adapter_set(backbone, mode, ranks, int(adapter_seeds[M + i]), adapted_layers) for i in range(M)]
        self.int_adapters = [{"fc1": _linear_params(rng, d, d), "fc2": _linear_params(rng, d, d)}
                             for _ in range(M)]
        self.aux_heads = [_linear_params(rng, d, num_classes) for _ in range(M)]
        self.primary_heads = [_linear_params(rng, d, num_classes) for _ in range(M)]
        self.gating = _linear_params(rng, M * d, M)

    @property
    def uses_int(self) -> bool:
        return self.insert_layer < self.backbone.config.layers

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.M):
            out.update({f"aux.{i}.{k}": v for k, v in self.aux_adapters[i].parameters().items()})
        for i in range(self.M):
            out.update({f"primary.{i}.{k}": v for k, v in self.primary_adapters[i].parameters().items()})
        for i, ad in enumerate(self.int_adapters):
            for layer, lp in ad.items():
                out.update({f"int.{i}.{layer}.{k}": v for k, v in lp.items()})
        for prefix, heads in (("aux_head", self.aux_heads), ("primary_head", self.primary_heads)):
            for i, h in enumerate(heads):
                out.update({f"{prefix}.{i}.{k}": v for k, v in h.items()})
        out.update({f"gating.{k}": v for k, v in self.gating.items()})
        return out

    def load_adapters(self, modality: int, adapters: AdapterSet, head: dict | None = None) -> None:
        """Initialize both adapter sets of ``modality`` from a pre-adapted set (independent copies)."""
        self.aux_adapters[modality] = adapters.copy()
        self.primary_adapters[modality] = adapters.copy()
        if head is not None:
            self.aux_heads[modality] = {k: v.copy() for k, v in head.items()}


def _head(params, x):
    return nx.affine(x, params["weight"], params["bias"])


def int_adapter(model: EIModel, t: int, cls: Tensor) -> Tensor:
    p = model.int_adapters[t]
    return _head(p["fc2"], nx.gelu(_head(p["fc1"], cls)))


def aux_cls(model: EIModel, x) -> tuple[list[Tensor], list[Tensor]]:
    """Auxiliary CLS per modality at the acquire layer and at full depth."""
    bb, L, acq = model.backbone, model.backbone.config.layers, model.acquire_layer
    at_acquire, full = [], []
    for i in range(model.M):
        seq = forward_segment(patchify_embed(x[i], bb), bb, model.aux_adapters[i], 0, acq)
        at_acquire.append(extract_cls(seq))
        full.append(extract_cls(forward_segment(seq, bb, model.aux_adapters[i], acq, L)))
    return at_acquire, full


def _check_target(model, t):
    if not 0 <= t < model.M:
        raise ConfigError(f"target modality {t} outside [0, {model.M})")


def generate_int_tokens(model: EIModel, x, t: int, acquired: list[Tensor] | None = None):
    """INT tokens ``[B, M-1, d]`` for target ``t`` (references in ascending order) and their raw CLS."""
    _check_target(model, t)
    if acquired is None:
        acquired = aux_cls(model, x)[0]
    refs = [acquired[r] for r in range(model.M) if r != t]
    rows = []
    for cls in refs:
        tok = int_adapter(model, t, cls)
        rows.append(nx.reshape(tok, (tok.shape[0], 1, tok.shape[1])))
    return nx.concat(rows, axis=1), refs


def primary_sequence(model: EIModel, x, t: int, int_tokens: Tensor | None) -> TokenSequence:
    """Final-layer token sequence of target ``t``; ``int_tokens=None`` gives the plain forward."""
    _check_target(model, t)
    bb, L, j = model.backbone, model.backbone.config.layers, model.insert_layer
    adapters = model.primary_adapters[t]
    seq = forward_segment(patchify_embed(x[t], bb), bb, adapters, 0, j)
    if int_tokens is not None:
        seq = append_tokens(seq, int_tokens)
    return forward_segment(seq, bb, adapters, j, L)


def primary_features(model: EIModel, x, t: int, int_tokens: Tensor | None) -> Tensor:
    """Target CLS after the intervened primary forward."""
    return extract_cls(primary_sequence(model, x, t, int_tokens))


def late_fusion(model: EIModel, cls_list: list[Tensor]):
    """``(y_hat, per-modality logits, alpha, gating logits)``."""
    y_t = [_head(model.primary_heads[t], c) for t, c in enumerate(cls_list)]
    gate_logits = _head(model.gating, nx.concat(cls_list, axis=-1))
    alpha = nx.softmax(gate_logits, axis=-1)
    y_hat = None
    for t, yt in enumerate(y_t):
        term = nx.mul(nx.getitem(alpha, (slice(None), slice(t, t + 1))), yt)
        y_hat = term if y_hat is None else nx.add(y_hat, term)
    return y_hat, y_t, alpha, gate_logits


def forward(model: EIModel, x):
    """Full forward for a batch: returns primary CLS, fusion outputs and full-depth aux CLS."""
    acquired, full = aux_cls(model, x)
    cls_p = []
    for t in range(model.M):
        ints = generate_int_tokens(model, x, t, acquired)[0] if model.uses_int else None
        cls_p.append(primary_features(model, x, t, ints))
    y_hat, y_t, alpha, gate_logits = late_fusion(model, cls_p)
    return {"cls_p": cls_p, "cls_a": full, "y_hat": y_hat, "y_t": y_t, "alpha": alpha,
            "gate_logits": gate_logits}


@dataclass
class LossBreakdown:
    L_p: Tensor
    L_aa: Tensor
    L_ag: Tensor
    L_total: Tensor
    y_hat: Tensor
    alpha: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("L_p", "L_aa", "L_ag", "L_total")}


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


def compute_losses(model: EIModel, x, y, prior: ModalityPrior, weights: LossWeights,
                   outputs: dict | None = None) -> LossBreakdown:
    out = forward(model, x) if outputs is None else outputs
    y = np.asarray(y)
    ce = lambda logits: nx.cross_entropy(y, logits, multilabel=model.multilabel)
    L_p = _sum([ce(out["y_hat"])] + [ce(yt) for yt in out["y_t"]])
    L_aa = _sum([ce(_head(model.aux_heads[i], c)) for i, c in enumerate(out["cls_a"])])
    pi = np.broadcast_to(prior.pi, out["gate_logits"].shape)
    L_ag = nx.cross_entropy(pi, out["gate_logits"])
    total = nx.add(nx.add(L_p, nx.scale(L_aa, weights.lambda1)), nx.scale(L_ag, weights.lambda2))
    return LossBreakdown(L_p, L_aa, L_ag, total, out["y_hat"], out["alpha"])


def class_scores(logits: np.ndarray, multilabel: bool) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if multilabel:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class UnimodalModel:
    """Backbone + one adapter set + linear head, used for pre-adaptation."""

    def __init__(self, backbone: ViTBackbone, adapters: AdapterSet, head: dict, multilabel=False):
        self.backbone, self.adapters, self.head = backbone, adapters, head
        self.multilabel = multilabel

    def features(self, images) -> Tensor:
        bb = self.backbone
        seq = forward_segment(patchify_embed(images, bb), bb, self.adapters, 0, bb.config.layers)
        return extract_cls(seq)

    def logits(self, images) -> Tensor:
        return _head(self.head, self.features(images))

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {f"adapters.{k}": v for k, v in self.adapters.parameters().items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out


def new_unimodal(backbone, num_classes, mode="mor", ranks=None, seed=0, multilabel=False,
                 adapted_layers=ADAPTABLE_LINEARS) -> UnimodalModel:
    adapters = init_adapter_set(backbone, mode, ranks, seed, adapted_layers)
    head = _linear_params(np.random.default_rng([seed, 3]), backbone.config.dim, num_classes)
    return UnimodalModel(backbone, adapters, head, multilabel)
