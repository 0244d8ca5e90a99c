import numpy as np
import pytest

from eimor.backbone import ViTBackbone, ViTConfig
from eimor.data import Sample, SyntheticSpec, generate_synthetic, load_split
from eimor.ei import (
    SGD, CyclicLR, EIModel, LossWeights, ModalityPrior, TrainConfig, compute_modality_prior,
    evaluate_model, fit, new_unimodal, predict, pretrain_unimodal, train_epoch,
)
from eimor.errors import DataError
from eimor.numerics import NumericError
from eimor.numerics.init import param

SMALL = ViTConfig(image_size=8, patch_size=4, dim=16, layers=2, heads=2, mlp_ratio=2)


def samples(rng, n, M=2, C=2, split="train"):
    return [Sample(f"s{i:03d}", [rng.normal(0, 1, (1, 8, 8)).astype(np.float32) for _ in range(M)],
                   np.eye(C)[i % C], split) for i in range(n)]


def test_cyclic_schedule():
    s = CyclicLR(1e-5, 1e-3, steps_per_epoch=10, total_steps=1000, warmup_frac=0.0)
    assert s(0) == 1e-5 and s(10) == pytest.approx(1e-3) and s(20) == 1e-5
    assert s(5) == pytest.approx((1e-5 + 1e-3) / 2)
    assert s(30) == pytest.approx(1e-3)
    w = CyclicLR(1e-5, 1e-3, steps_per_epoch=10, total_steps=200, warmup_frac=0.05)
    assert w.warmup == 10 and w(0) == 1e-5
    assert w(5) == pytest.approx(1e-5 + (w.cyclic(5) - 1e-5) * 0.5)
    assert w(10) == w.cyclic(10)


def test_sgd_semantics():
    w = param(np.array([1.0, -2.0]), True)
    b = param(np.array([0.5]), True)
    r = param(np.array([[0.3]]), True)
    opt = SGD({"w.weight": w, "b.bias": b, "x.router": r}, momentum=0.9, weight_decay=0.1)
    for p in (w, b, r):
        p.grad = np.ones_like(p.data)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, [1.0 - 0.1 * 1.1, -2.0 - 0.1 * 0.8])
    np.testing.assert_allclose(b.data, [0.4])
    np.testing.assert_allclose(r.data, [[0.2]])
    for p in (w, b, r):
        p.grad = np.zeros_like(p.data)
    opt.step(0.1)
    np.testing.assert_allclose(b.data, [0.4 - 0.1 * 0.9])


def test_train_epoch_counts_steps_and_keeps_backbone(rng):
    bb = ViTBackbone(SMALL)
    h0 = bb.parameter_hash()
    m = EIModel(bb, 2, 2)
    cfg = TrainConfig()
    opt = SGD(m.trainable_parameters())
    sched = CyclicLR(cfg.lr_min, cfg.lr_max, 3, 3)
    stats = train_epoch(m, samples(rng, 20), ModalityPrior.from_scores([1, 0]), LossWeights(), opt, sched,
                        batch_size=8, rng=np.random.default_rng(0))
    assert stats.steps == 3 and opt.steps == 3
    assert set(stats.losses) == {"L_p", "L_aa", "L_ag", "L_total"}
    assert bb.parameter_hash() == h0


def test_non_finite_loss_aborts(rng):
    m = EIModel(ViTBackbone(SMALL), 2, 2)
    m.primary_heads[0]["bias"].data[0] = np.nan
    opt = SGD(m.trainable_parameters())
    with pytest.raises(NumericError, match="non-finite"):
        train_epoch(m, samples(rng, 8), ModalityPrior.from_scores([1, 0]), LossWeights(), opt,
                    CyclicLR(1e-5, 1e-3, 1, 1))


def test_early_stopping_after_exactly_patience(rng):
    m = EIModel(ViTBackbone(SMALL), 2, 2)
    # a zero learning rate keeps validation mAP constant after epoch 1
    cfg = TrainConfig(max_epochs=20, patience=3, lr_min=0.0, lr_max=0.0)
    seen = []
    res = fit(m, samples(rng, 8), samples(rng, 8, split="val"), ModalityPrior.from_scores([1, 0]),
              LossWeights(), cfg, seen.append)
    assert len(res.history) == len(seen) == 4 and res.stopped_early
    assert res.best_epoch == 1


def test_fit_restores_best_parameters(rng):
    m = EIModel(ViTBackbone(SMALL), 2, 2)
    train, val = samples(rng, 16), samples(rng, 8, split="val")
    res = fit(m, train, val, ModalityPrior.from_scores([1, 0]), LossWeights(),
              TrainConfig(max_epochs=3, patience=10, lr_max=1e-2))
    best = max(h.val_map for h in res.history)
    assert res.best_val_map == best
    assert res.best_epoch == min(h.epoch for h in res.history if h.val_map == best)
    assert evaluate_model(m, val).macro["map"] == best


def test_fit_is_deterministic(rng):
    train, val = samples(rng, 16), samples(rng, 8, split="val")
    outs = []
    for _ in range(2):
        m = EIModel(ViTBackbone(SMALL), 2, 2, seed=3)
        fit(m, train, val, ModalityPrior.from_scores([0, 1]), LossWeights(), TrainConfig(max_epochs=2))
        outs.append(predict(m, val))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_empty_split_errors():
    m = EIModel(ViTBackbone(SMALL), 2, 2)
    with pytest.raises(DataError):
        fit(m, [], [], ModalityPrior.from_scores([1, 0]), LossWeights(), TrainConfig())
    with pytest.raises(DataError):
        compute_modality_prior([], [])


def test_pretrain_zero_epochs_is_fresh_and_backbone_frozen(rng):
    bb = ViTBackbone(SMALL)
    h0 = bb.parameter_hash()
    fresh = new_unimodal(bb, 2, seed=4)
    got = pretrain_unimodal(bb, samples(rng, 8), 0, 2, epochs=0, seed=4)
    for k, p in fresh.trainable_parameters().items():
        np.testing.assert_array_equal(p.data, got.trainable_parameters()[k].data)
    pretrain_unimodal(bb, samples(rng, 8), 1, 2, epochs=1, seed=4)
    assert bb.parameter_hash() == h0


def test_prior_picks_best_training_modality(rng):
    bb = ViTBackbone(SMALL)
    train = samples(rng, 12)
    good, bad = new_unimodal(bb, 2, seed=1), new_unimodal(bb, 2, seed=2)
    prior = compute_modality_prior([good, bad], train)
    assert prior.pi.sum() == 1 and len(prior.source_scores) == 2
    assert prior.pi.argmax() == int(np.argmax(prior.source_scores))


def test_pretraining_fits_linearly_separable_task(tmp_path):
    accs = []
    for seed in (0, 1, 2):
        spec = SyntheticSpec("unimodal-linear", train=1000, val=0, test=0, seed=seed)
        train = load_split(generate_synthetic(spec, tmp_path / str(seed)), "train")
        uni = pretrain_unimodal(ViTBackbone(ViTConfig(seed=seed)), train, 0, 2, epochs=30, seed=seed,
                                cfg=TrainConfig(seed=seed))
        view = [Sample(s.id, [s.tensors[0]], s.label, s.split) for s in train]
        accs.append((predict(uni, view).argmax(1) == np.stack([s.label for s in train]).argmax(1)).mean())
    print("training accuracy per seed:", accs)
    assert np.mean(accs) >= 0.95
