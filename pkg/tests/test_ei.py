import numpy as np
import pytest

from eimor.backbone import (
    ViTBackbone, ViTConfig, append_tokens, extract_cls, forward_segment, patchify_embed,
)
from eimor.errors import ConfigError
from eimor.ei import (
    EIModel, LossWeights, ModalityPrior, aux_cls, compute_losses, forward, generate_int_tokens,
    late_fusion, new_unimodal, primary_features, primary_sequence,
)
from eimor.numerics import Tape, Tensor

SMALL = ViTConfig(image_size=8, patch_size=4, dim=16, layers=2, heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def bb():
    return ViTBackbone(SMALL)


def batch(rng, M=2, B=3):
    return [Tensor(rng.normal(0, 1, (B, 1, 8, 8))) for _ in range(M)]


def perturb(model, rng, std=0.1):
    for p in model.trainable_parameters().values():
        p.data = p.data + rng.normal(0, std, p.shape).astype(p.data.dtype)


def test_construction_and_errors(bb):
    m = EIModel(bb, 3, 2)
    assert len(m.aux_adapters) == len(m.primary_adapters) == 3 and len(m.int_adapters) == 3
    assert len(m.aux_heads) == len(m.primary_heads) == 3 and m.acquire_layer == 2 and m.uses_int
    assert not EIModel(bb, 2, 2, insert_layer=2).uses_int
    for kwargs in ({"acquire_layer": 0}, {"acquire_layer": 3}, {"insert_layer": 3}, {"mode": "nope"}):
        with pytest.raises(ConfigError):
            EIModel(bb, 2, 2, **kwargs)
    with pytest.raises(ConfigError):
        EIModel(bb, 1, 2)


def test_int_tokens_shape_and_order(bb, rng):
    m = EIModel(bb, 3, 2)
    perturb(m, rng)
    x = batch(rng, 3)
    ints, refs = generate_int_tokens(m, x, 1)
    assert ints.shape == (3, 2, 16)
    acquired = aux_cls(m, x)[0]
    np.testing.assert_array_equal(refs[0].data, acquired[0].data)
    np.testing.assert_array_equal(refs[1].data, acquired[2].data)
    two = EIModel(bb, 2, 2)
    assert generate_int_tokens(two, batch(rng), 0)[0].shape == (3, 1, 16)
    with pytest.raises(ConfigError):
        generate_int_tokens(m, x, 3)


def test_zero_int_adapter_gives_zero_tokens(bb, rng):
    m = EIModel(bb, 2, 2)
    for layer in m.int_adapters[0].values():
        for p in layer.values():
            p.data[...] = 0
    assert not generate_int_tokens(m, batch(rng), 0)[0].data.any()


@pytest.mark.parametrize("j", [0, 1, 2])
def test_insertion_depth(bb, rng, j):
    m = EIModel(bb, 2, 2, insert_layer=j)
    perturb(m, rng)
    x = batch(rng)
    ints = generate_int_tokens(m, x, 0)[0]
    seq = primary_sequence(m, x, 0, ints)
    assert seq.tokens.shape[1] == 1 + 4 + 1
    ad = m.primary_adapters[0]
    manual = forward_segment(patchify_embed(x[0], bb), bb, ad, 0, j)
    manual = forward_segment(append_tokens(manual, ints), bb, ad, j, 2)
    np.testing.assert_array_equal(seq.tokens.data, manual.tokens.data)


def test_insert_at_last_layer_is_no_int(bb, rng):
    m = EIModel(bb, 2, 2, insert_layer=2)
    perturb(m, rng)
    x = batch(rng)
    ints = generate_int_tokens(m, x, 1)[0]
    plain = extract_cls(forward_segment(patchify_embed(x[1], bb), bb, m.primary_adapters[1], 0, 2))
    np.testing.assert_array_equal(primary_features(m, x, 1, ints).data, plain.data)
    np.testing.assert_array_equal(forward(m, x)["cls_p"][1].data, plain.data)


def test_late_fusion_is_convex_mix(bb, rng, f64):
    m = EIModel(bb, 2, 3)
    perturb(m, rng)
    cls = [Tensor(rng.normal(0, 1, (4, 16))) for _ in range(2)]
    y_hat, y_t, alpha, _ = late_fusion(m, cls)
    a = alpha.data
    assert (a > 0).all() and np.abs(a.sum(1) - 1).max() <= 1e-12
    np.testing.assert_allclose(y_hat.data, a[:, :1] * y_t[0].data + a[:, 1:] * y_t[1].data, rtol=1e-12)
    # one-hot gate selects the first modality
    m.gating["weight"].data[...] = 0
    m.gating["bias"].data[...] = [800.0, 0.0]
    y_hat, y_t, _, _ = late_fusion(m, cls)
    np.testing.assert_array_equal(y_hat.data, y_t[0].data)
    # identical heads and features: any alpha returns the shared prediction
    m.gating["bias"].data[...] = [0.3, -0.2]
    m.primary_heads[1] = {k: v.copy() for k, v in m.primary_heads[0].items()}
    y_hat, y_t, _, _ = late_fusion(m, [cls[0], cls[0]])
    np.testing.assert_allclose(y_hat.data, y_t[0].data, rtol=1e-12)


def test_loss_composition(bb, rng):
    m = EIModel(bb, 2, 2)
    perturb(m, rng)
    x, y = batch(rng), np.eye(2)[[0, 1, 1]]
    prior = ModalityPrior.from_scores([0.4, 0.6])
    out = forward(m, x)
    L = compute_losses(m, x, y, prior, LossWeights(), out)
    assert L.L_total.item() == L.L_p.item() + 0.3 * L.L_aa.item() + 0.1 * L.L_ag.item()
    L0 = compute_losses(m, x, y, prior, LossWeights(0.0, 0.0), out)
    assert L0.L_total.item() == L0.L_p.item()
    with pytest.raises(ConfigError):
        LossWeights(-1.0, 0.1)


def test_saturated_heads_drive_loss_to_zero(bb, rng, f64):
    m = EIModel(bb, 2, 2)
    for heads in (m.primary_heads, m.aux_heads):
        for h in heads:
            h["weight"].data[...] = 0
            h["bias"].data[...] = [50.0, 0.0]
    m.gating["weight"].data[...] = 0
    m.gating["bias"].data[...] = [50.0, 0.0]
    L = compute_losses(m, batch(rng), np.eye(2)[[0, 0, 0]], ModalityPrior.from_scores([1, 0]), LossWeights())
    assert L.L_total.item() <= 1e-6


def test_modality_prior_rule():
    assert ModalityPrior.from_scores([0.9, 0.7]).pi.tolist() == [1, 0]
    assert ModalityPrior.from_scores([0.8, 0.8]).pi.tolist() == [1, 0]
    assert ModalityPrior.from_scores([0.5, 0.6, 0.9]).pi.tolist() == [0, 0, 1]


def _grads(m, x, y, weights):
    params = m.trainable_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        L = compute_losses(m, x, y, ModalityPrior.from_scores([1, 0]), weights)
    tape.backward(L.L_total)
    return params


@pytest.mark.parametrize("lam1", [0.3, 0.0])
def test_aux_adapters_receive_gradient(bb, rng, lam1):
    m = EIModel(bb, 2, 2)
    perturb(m, rng)
    params = _grads(m, batch(rng), np.eye(2)[[0, 1, 0]], LossWeights(lam1, 0.1))
    for i in range(2):
        aux = [p.grad for k, p in params.items() if k.startswith(f"aux.{i}.")]
        assert any(g is not None and np.abs(g).max() > 0 for g in aux)
        assert np.abs(params[f"int.{1 - i}.fc1.weight"].grad).max() > 0


def test_role_symmetry(bb, rng):
    m = EIModel(bb, 2, 2)
    perturb(m, rng)
    m.aux_adapters[1] = m.aux_adapters[0].copy()
    m.primary_adapters[1] = m.primary_adapters[0].copy()
    m.int_adapters[1] = {k: {n: t.copy() for n, t in v.items()} for k, v in m.int_adapters[0].items()}
    x0 = batch(rng)[0]
    cls = forward(m, [x0, x0])["cls_p"]
    np.testing.assert_array_equal(cls[0].data, cls[1].data)


def test_load_adapters_makes_independent_copies(bb, rng):
    m = EIModel(bb, 2, 2)
    uni = new_unimodal(bb, 2, seed=4)
    m.load_adapters(0, uni.adapters, uni.head)
    a, p = m.aux_adapters[0].parameters(), m.primary_adapters[0].parameters()
    k = next(iter(a))
    np.testing.assert_array_equal(a[k].data, p[k].data)
    a[k].data += 1
    assert not np.array_equal(a[k].data, p[k].data)
    np.testing.assert_array_equal(m.aux_heads[0]["weight"].data, uni.head["weight"].data)
