"""SGD with a warmed-up triangular cyclic schedule, EI training and pre-adaptation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numerics as nx
from ..data import Sample, stack_batch
from ..errors import DataError
from ..metrics import EvalReport, evaluate
from ..numerics import NumericError, Tape, Tensor, no_tape
from .model import (
    EIModel, LossWeights, ModalityPrior, UnimodalModel, class_scores, compute_losses, forward,
    new_unimodal,
)


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 10
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    momentum: float = 0.95
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    seed: int = 0


class CyclicLR:
    """Triangular cycle between ``lr_min`` and ``lr_max`` with a two-epoch period.

    The cycle starts at ``lr_min`` and peaks after one epoch. During the first
    ``warmup_frac`` of all planned steps the rate is blended linearly from
    ``lr_min`` towards the cyclic value.
    """

    def __init__(self, lr_min, lr_max, steps_per_epoch, total_steps, warmup_frac=0.05):
        self.lr_min, self.lr_max = lr_min, lr_max
        self.half = max(1, steps_per_epoch)
        self.warmup = int(round(warmup_frac * total_steps))

    def cyclic(self, step: int) -> float:
        pos = (step % (2 * self.half)) / self.half
        return self.lr_min + (self.lr_max - self.lr_min) * (1.0 - abs(1.0 - pos))

    def __call__(self, step: int) -> float:
        lr = self.cyclic(step)
        if step < self.warmup:
            lr = self.lr_min + (lr - self.lr_min) * step / self.warmup
        return lr


class SGD:
    """Momentum SGD; weight decay skips biases and router weights."""

    def __init__(self, params: dict[str, Tensor], momentum=0.95, weight_decay=1e-4):
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.decay = {k: not (k.endswith("bias") or k.endswith("router")) for k in params}
        self.steps = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.decay[k] and self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)
        self.steps += 1


def batches(samples: list[Sample], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for i in range(0, len(samples), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: dict[str, Tensor], state: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = state[k].copy()


@dataclass
class EpochStats:
    epoch: int
    steps: int
    lr: float
    losses: dict[str, float]
    val_map: float | None = None


def train_epoch(model: EIModel, train: list[Sample], prior: ModalityPrior, weights: LossWeights,
                opt: SGD, schedule: CyclicLR, batch_size: int = 8, rng=None, epoch: int = 0) -> EpochStats:
    totals = {"L_p": 0.0, "L_aa": 0.0, "L_ag": 0.0, "L_total": 0.0}
    steps, lr = 0, schedule(opt.steps)
    for batch in batches(train, batch_size, rng):
        x, y = stack_batch(batch, nx.get_dtype())
        opt.zero_grad()
        with Tape() as tape:
            losses = compute_losses(model, x, y, prior, weights)
        values = losses.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericError(f"non-finite loss at epoch {epoch} step {opt.steps}: {values}")
        tape.backward(losses.L_total)
        lr = schedule(opt.steps)
        opt.step(lr)
        steps += 1
        for k, v in values.items():
            totals[k] += v
    return EpochStats(epoch, steps, lr, {k: v / max(steps, 1) for k, v in totals.items()})


def predict(model, samples: list[Sample], batch_size: int = 64) -> np.ndarray:
    """Class scores of the fused prediction (or a unimodal model's head)."""
    out = []
    with no_tape():
        for batch in batches(samples, batch_size, None):
            x, _ = stack_batch(batch, nx.get_dtype())
            if isinstance(model, UnimodalModel):
                logits = model.logits(x[0]).data
            else:
                logits = forward(model, x)["y_hat"].data
            out.append(class_scores(logits, model.multilabel))
    return np.concatenate(out)


def evaluate_model(model, samples: list[Sample], batch_size: int = 64) -> EvalReport:
    if not samples:
        raise DataError("cannot evaluate on an empty split")
    labels = np.stack([s.label for s in samples])
    return evaluate(predict(model, samples, batch_size), labels, model.multilabel)


@dataclass
class FitResult:
    best_epoch: int
    best_val_map: float
    history: list[EpochStats] = field(default_factory=list)
    stopped_early: bool = False


def fit(model: EIModel, train: list[Sample], val: list[Sample], prior: ModalityPrior,
        weights: LossWeights, cfg: TrainConfig, on_epoch=None) -> FitResult:
    """Train with per-epoch validation; keeps the best-by-val-mAP parameters (earlier epoch on ties)."""
    if not train:
        raise DataError("empty training split")
    params = model.trainable_parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    schedule = CyclicLR(cfg.lr_min, cfg.lr_max, steps_per_epoch, steps_per_epoch * cfg.max_epochs,
                        cfg.warmup_frac)
    best, best_state, bad = None, snapshot(params), 0
    result = FitResult(0, float("nan"))
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        stats = train_epoch(model, train, prior, weights, opt, schedule, cfg.batch_size, rng, epoch)
        stats.val_map = evaluate_model(model, val).macro["map"]
        result.history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if best is None or stats.val_map > best:
            best, bad = stats.val_map, 0
            best_state = snapshot(params)
            result.best_epoch, result.best_val_map = epoch, stats.val_map
        else:
            bad += 1
            if bad >= cfg.patience:
                result.stopped_early = True
                break
    restore(params, best_state)
    return result


# --------------------------------------------------------- pre-adaptation

def _modality_view(samples: list[Sample], modality: int) -> list[Sample]:
    return [Sample(s.id, [s.tensors[modality]], s.label, s.split) for s in samples]


def pretrain_unimodal(backbone, samples: list[Sample], modality: int, num_classes: int,
                      mode: str = "mor", ranks=None, epochs: int = 10,
                      cfg: TrainConfig | None = None, seed: int = 0, multilabel: bool = False,
                      adapted_layers=None) -> UnimodalModel:
    """Fit an adapter set and linear head on one modality with cross-entropy."""
    cfg = cfg or TrainConfig()
    kwargs = {} if adapted_layers is None else {"adapted_layers": adapted_layers}
    model = new_unimodal(backbone, num_classes, mode, ranks, seed, multilabel, **kwargs)
    view = _modality_view(samples, modality)
    if epochs <= 0:
        return model
    if not view:
        raise DataError("empty training split")
    params = model.trainable_parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(view) / cfg.batch_size)
    schedule = CyclicLR(cfg.lr_min, cfg.lr_max, steps_per_epoch, steps_per_epoch * epochs, cfg.warmup_frac)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([cfg.seed, 1000 + modality, epoch])
        for batch in batches(view, cfg.batch_size, rng):
            x, y = stack_batch(batch, nx.get_dtype())
            opt.zero_grad()
            with Tape() as tape:
                loss = nx.cross_entropy(y, model.logits(x[0]), multilabel=multilabel)
            if not math.isfinite(float(loss.data)):
                raise NumericError(f"non-finite pre-adaptation loss at epoch {epoch}")
            tape.backward(loss)
            opt.step(schedule(opt.steps))
    return model


def compute_modality_prior(unimodal_models: list[UnimodalModel], train: list[Sample]) -> ModalityPrior:
    """One-hot prior at the modality whose unimodal model has the best training mAP."""
    if not train:
        raise DataError("empty training split")
    scores = [evaluate_model(m, _modality_view(train, i)).macro["map"] for i, m in enumerate(unimodal_models)]
    return ModalityPrior.from_scores(scores)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
