import numpy as np
import pytest

from eimor import numerics as nx
from eimor.backbone import ViTBackbone, ViTConfig, forward_segment, patchify_embed
from eimor.errors import ConfigError
from eimor.mor import (
    DEFAULT_RANKS, MODES, LoRAUnit, MoRAdapter, init_adapter_set, mor_linear_forward, router_weights,
)
from eimor.numerics import Tape, Tensor
from eimor.numerics.init import param


@pytest.fixture(scope="module")
def bb():
    return ViTBackbone(ViTConfig())


def test_worked_example_single_unit():
    W = param(np.eye(2))
    ad = MoRAdapter("mor", [LoRAUnit(param([[1.0, 1.0]]), param([[1.0], [0.0]]))], param(np.zeros((2, 2))))
    out = mor_linear_forward(ad, W, None, Tensor([[1.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[2.5, 2.0]])
    np.testing.assert_allclose(router_weights(ad, Tensor([[1.0, 2.0]])).data, [[0.5, 0.5]])


def test_zero_router_is_uniform(rng):
    ad = init_adapter_set(ViTBackbone(ViTConfig()), "mor").get("blocks.0.qkv")
    w = router_weights(ad, Tensor(rng.normal(0, 1, (5, 32)))).data
    assert (w == 0.25).all()


def test_router_is_a_distribution(rng):
    ad = init_adapter_set(ViTBackbone(ViTConfig()), "mor").get("blocks.1.fc1")
    ad.router.data = rng.normal(0, 1, ad.router.shape).astype(np.float32)
    w = router_weights(ad, Tensor(rng.normal(0, 1, (1000, 32)))).data
    assert (w > 0).all() and np.abs(w.sum(-1) - 1).max() <= 1e-6


def test_router_errors_in_unrouted_modes(bb):
    with pytest.raises(ConfigError):
        router_weights(init_adapter_set(bb, "lora").get("blocks.0.qkv"), Tensor(np.zeros((1, 32))))


@pytest.mark.parametrize("mode", MODES)
def test_fresh_adapter_is_bit_exact(bb, mode, rng):
    ad = init_adapter_set(bb, mode, seed=3)
    seq = patchify_embed(rng.normal(0, 1, (3, 1, 16, 16)), bb)
    np.testing.assert_array_equal(forward_segment(seq, bb, ad, 0, 4).tokens.data,
                                  forward_segment(seq, bb, None, 0, 4).tokens.data)


def test_bypass_saturation_skips_adaptation(rng):
    W = param(rng.normal(0, 0.3, (16, 12)))
    ad = MoRAdapter("mor", [LoRAUnit(param(rng.normal(0, 1, (r, 16))), param(rng.normal(0, 1, (12, r))))
                            for r in (2, 4, 8)], param(np.zeros((16, 4))))
    ad.logit_offset = np.array([50.0, 0.0, 0.0, 0.0])
    h = Tensor(rng.normal(0, 1, (20, 16)))
    assert router_weights(ad, h).data[:, 0].min() >= 1 - 1e-9
    frozen = nx.affine(h, W).data
    out = mor_linear_forward(ad, W, None, h).data
    assert np.abs(out - frozen).max() <= 1e-6 * np.abs(frozen).max()


def test_mor_single_unit_nests_lora(rng, f64):
    A, B = param(rng.normal(0, 1, (4, 8))), param(rng.normal(0, 1, (6, 4)))
    W, b = param(rng.normal(0, 1, (8, 6))), param(rng.normal(0, 1, 6))
    h = Tensor(rng.normal(0, 1, (5, 8)))
    mor = MoRAdapter("mor", [LoRAUnit(A, B)], param(rng.normal(0, 1, (8, 2))))
    mor.logit_offset = np.array([-np.inf, 0.0])
    lora = MoRAdapter("lora", [LoRAUnit(A, B)])
    np.testing.assert_array_equal(mor_linear_forward(mor, W, b, h).data, mor_linear_forward(lora, W, b, h).data)


def test_lora_moe_has_no_bypass(rng, f64):
    units = [LoRAUnit(param(rng.normal(0, 1, (2, 5))), param(rng.normal(0, 1, (3, 2)))) for _ in range(2)]
    ad = MoRAdapter("lora_moe", units, param(np.zeros((5, 2))))
    W = param(rng.normal(0, 1, (5, 3)))
    h = rng.normal(0, 1, (4, 5))
    expect = h @ W.data + sum(0.5 * (h @ u.A.data.T) @ u.B.data.T for u in units)
    np.testing.assert_allclose(mor_linear_forward(ad, W, None, Tensor(h)).data, expect, rtol=1e-12)


def test_adapter_set_counts(bb):
    ad = init_adapter_set(bb, "mor")
    assert len(ad) == 16
    expected = 0
    for _, d_in, d_out in bb.linear_layers():
        expected += sum(r * (d_in + d_out) for r in DEFAULT_RANKS["mor"]) + d_in * 4
    assert ad.num_parameters() == expected
    assert init_adapter_set(bb, "frozen").num_parameters() == 0


def test_init_is_deterministic_and_b_is_zero(bb):
    a, b = init_adapter_set(bb, "mor", seed=5), init_adapter_set(bb, "mor", seed=5)
    for (k, p), (_, q) in zip(a.parameters().items(), b.parameters().items()):
        np.testing.assert_array_equal(p.data, q.data)
        if k.endswith(".B") or k.endswith("router"):
            assert not p.data.any()


def test_rank_validation(bb):
    with pytest.raises(ConfigError):
        init_adapter_set(bb, "mor", ranks=(2, 4, 32))
    with pytest.raises(ConfigError):
        init_adapter_set(bb, "lora_moe", ranks=(2, 4))
    with pytest.raises(ConfigError):
        init_adapter_set(bb, "lora", ranks=(2, 4))
    with pytest.raises(ConfigError):
        init_adapter_set(bb, "bogus")


def test_all_adapter_tensors_move_after_ten_steps(bb, rng):
    ad = init_adapter_set(bb, "mor", seed=0)
    start = {k: p.data.copy() for k, p in ad.parameters().items()}
    head = param(rng.normal(0, 0.1, (32, 3)), True)
    x = rng.normal(0, 1, (8, 1, 16, 16))
    y = np.eye(3)[rng.integers(0, 3, 8)]
    for _ in range(10):
        for p in list(ad.parameters().values()) + [head]:
            p.grad = None
        with Tape() as tape:
            seq = forward_segment(patchify_embed(x, bb), bb, ad, 0, 4)
            loss = nx.cross_entropy(y, nx.affine(nx.getitem(seq.tokens, (slice(None), 0)), head))
        tape.backward(loss)
        for p in list(ad.parameters().values()) + [head]:
            p.data -= 0.5 * p.grad
    for k, p in ad.parameters().items():
        assert not np.array_equal(p.data, start[k]), k
