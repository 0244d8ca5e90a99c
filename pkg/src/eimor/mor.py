"""Mixture of low-varied-rank adapters (MoR) and its reduced modes.

Modes:

* ``frozen``   - no adaptation, the layer is the plain frozen linear map.
* ``lora``     - one low-rank unit, always on.
* ``lora_moe`` - several equal-rank units mixed by a softmax router.
* ``mor``      - units of distinct ranks plus a bypass route in the router;
  mass routed to the bypass is simply dropped, so a saturated bypass skips
  the adaptation entirely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor
from .numerics.init import param

MODES = ("frozen", "lora", "lora_moe", "mor")
DEFAULT_RANKS = {"frozen": (), "lora": (4,), "lora_moe": (4, 4, 4), "mor": (2, 4, 8)}


@dataclass
class LoRAUnit:
    A: Tensor  # [r, d_in]
    B: Tensor  # [d_out, r]

    @property
    def rank(self) -> int:
        return self.A.shape[0]


class MoRAdapter:
    def __init__(self, mode: str, units: list[LoRAUnit], router: Tensor | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown adapter mode {mode!r}")
        routed = mode in ("mor", "lora_moe")
        if routed != (router is not None):
            raise ConfigError(f"mode {mode} {'needs' if routed else 'takes no'} router")
        if mode == "frozen" and units or mode == "lora" and len(units) != 1:
            raise ConfigError(f"mode {mode} cannot hold {len(units)} units")
        if router is not None and router.shape[1] != len(units) + (mode == "mor"):
            raise ConfigError(f"router width {router.shape[1]} does not fit {len(units)} units in mode {mode}")
        self.mode = mode
        self.units = units
        self.router = router
        # constant added to router logits; lets tests pin the routing
        self.logit_offset: np.ndarray | None = None

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(u.rank for u in self.units)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, u in enumerate(self.units):
            out[f"units.{k}.A"] = u.A
            out[f"units.{k}.B"] = u.B
        if self.router is not None:
            out["router"] = self.router
        return out

    def copy(self) -> "MoRAdapter":
        twin = MoRAdapter(self.mode, [LoRAUnit(u.A.copy(), u.B.copy()) for u in self.units],
                          None if self.router is None else self.router.copy())
        twin.logit_offset = None if self.logit_offset is None else self.logit_offset.copy()
        return twin


class AdapterSet:
    """One adapter per designated linear layer of a backbone, keyed by layer id."""

    def __init__(self, adapters: dict[str, MoRAdapter], mode: str, ranks: tuple[int, ...]):
        self.adapters = adapters
        self.mode = mode
        self.ranks = tuple(ranks)

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.items())

    def get(self, layer_id: str) -> MoRAdapter | None:
        return self.adapters.get(layer_id)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{lid}.{k}": t for lid, a in self.adapters.items() for k, t in a.parameters().items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def copy(self) -> "AdapterSet":
        return AdapterSet({k: a.copy() for k, a in self.adapters.items()}, self.mode, self.ranks)


def _check_ranks(mode: str, ranks) -> tuple[int, ...]:
    ranks = tuple(int(r) for r in (DEFAULT_RANKS[mode] if ranks is None else ranks))
    if mode == "frozen":
        return ()
    if not ranks or min(ranks) < 1:
        raise ConfigError(f"mode {mode} needs positive ranks, got {ranks}")
    if mode == "lora" and len(ranks) != 1:
        raise ConfigError(f"lora mode takes exactly one rank, got {ranks}")
    if mode == "lora_moe" and len(set(ranks)) != 1:
        raise ConfigError(f"lora_moe mode needs equal ranks, got {ranks}")
    return ranks


def init_adapter_set(backbone, mode: str = "mor", ranks=None, seed: int = 0,
                     layers=None) -> AdapterSet:
    """Fresh adapters: ``A ~ N(0, 0.02)``, ``B = 0``, router zero (uniform routing)."""
    if mode not in MODES:
        raise ConfigError(f"unknown adapter mode {mode!r}; expected one of {MODES}")
    ranks = _check_ranks(mode, ranks)
    rng = np.random.default_rng(seed)
    specs = backbone.linear_layers() if layers is None else backbone.linear_layers(layers)
    adapters = {}
    for layer_id, d_in, d_out in specs:
        if ranks and max(ranks) >= min(d_in, d_out):
            raise ConfigError(f"rank {max(ranks)} too large for {layer_id} ({d_in}->{d_out})")
        units = [LoRAUnit(param(rng.normal(0.0, 0.02, size=(r, d_in)), True),
                          param(np.zeros((d_out, r)), True)) for r in ranks]
        router = None
        if mode in ("mor", "lora_moe"):
            router = param(np.zeros((d_in, len(ranks) + (mode == "mor"))), True)
        adapters[layer_id] = MoRAdapter(mode, units, router)
    return AdapterSet(adapters, mode, ranks)


def router_weights(adapter: MoRAdapter, h) -> Tensor:
    """Per-token routing distribution ``softmax(h @ router)``; width is units (+1 bypass in mor)."""
    if adapter.router is None:
        raise ConfigError(f"mode {adapter.mode} has no router")
    logits = nx.affine(h, adapter.router)
    if adapter.logit_offset is not None:
        logits = nx.add(logits, Tensor(adapter.logit_offset))
    return nx.softmax(logits, axis=-1)


def mor_linear_forward(adapter: MoRAdapter | None, W: Tensor, bias: Tensor | None, h) -> Tensor:
    """Adapted linear layer ``h @ W + b + sum_k w_k (h A_k^T) B_k^T``."""
    if adapter is None or adapter.mode == "frozen":
        return nx.affine(h, W, bias)
    return nx.mor_linear(h, W, bias, [u.A for u in adapter.units], [u.B for u in adapter.units],
                         adapter.router, bypass=adapter.mode == "mor",
                         logit_offset=adapter.logit_offset)
