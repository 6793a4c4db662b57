import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error, softmax
from ropscreen.backbones import FrozenBatchNorm2d, make_encoder
from ropscreen.structure import (D_VIS, Z_DIM, FiLMGenerator, GroupNormHead, MetadataProjector, MSAQNet,
                                 film_modulate, gated_refine, spatial_attention)

SIZE = 64


def small_net(**kw):
    return MSAQNet(input_size=SIZE, **kw)


def pyramid(seed, sizes=((4, 4), (3, 3), (2, 2)), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(1, D_VIS, h, w, generator=g, dtype=dtype) for h, w in sizes]


class TestProjector:
    def test_zero_weights_give_zero(self):
        proj = MetadataProjector()
        for p in proj.parameters():
            torch.nn.init.zeros_(p)
        assert torch.all(proj(torch.randn(5, 3)) == 0)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
    def test_non_negative_and_width(self, x):
        q = MetadataProjector()(torch.tensor([x]))
        assert q.shape == (1, 64) and torch.all(q >= 0)


class TestAttention:
    def test_two_position_example(self):
        q = torch.ones(1, 64)
        keys = torch.zeros(1, 64, 1, 2)
        keys[0, :, 0, 1] = 8.0 / 64  # q . k = 8, scaled by 1/sqrt(64) -> 1
        a = spatial_attention(q, keys)[0, 0]
        np.testing.assert_allclose(a.numpy(), softmax([0.0, 1.0]), atol=1e-6)
        np.testing.assert_allclose(a.numpy(), [0.2689, 0.7311], atol=1e-4)

    def test_identical_keys_uniform(self):
        keys = torch.randn(2, 64, 1, 1).expand(2, 64, 5, 7)
        a = spatial_attention(torch.randn(2, 64), keys)
        torch.testing.assert_close(a, torch.full_like(a, 1 / 35))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9), st.floats(0.01, 100))
    def test_sums_to_one(self, seed, h, w, scale):
        g = torch.Generator().manual_seed(seed)
        a = spatial_attention(torch.randn(3, 64, generator=g) * scale, torch.randn(3, 64, h, w, generator=g))
        assert torch.all(a >= 0)
        torch.testing.assert_close(a.sum((1, 2)), torch.ones(3), atol=1e-6, rtol=0)


class TestGate:
    def test_initial_gate(self):
        net = small_net()
        for aqu in net.aqus:
            assert abs(aqu.gate.item() - 0.11920) < 1e-4
            assert aqu.gate.item() == pytest.approx(1 / (1 + math.exp(2.0)), abs=1e-7)

    def test_large_negative_alpha_is_identity(self):
        v = torch.randn(2, 8, 5, 5, dtype=torch.float64)
        a = torch.softmax(torch.randn(2, 25, dtype=torch.float64), -1).reshape(2, 5, 5)
        out = gated_refine(v, a, torch.tensor(-30.0, dtype=torch.float64))
        assert (out - v).abs().max().item() < 1e-9

    def test_full_gate_uniform_attention(self):
        v = torch.randn(1, 4, 3, 2, dtype=torch.float64)
        a = torch.full((1, 3, 2), 1 / 6, dtype=torch.float64)
        out = gated_refine(v, a, torch.tensor(float("inf"), dtype=torch.float64))
        torch.testing.assert_close(out, v / 6)


class TestFiLM:
    def test_hand_example(self):
        out = film_modulate(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 0.5]), torch.tensor([-1.0, 1.0]))
        torch.testing.assert_close(out, torch.tensor([1.0, 2.0]))

    def test_identity_and_zero_gamma(self):
        z = torch.randn(4, 192)
        assert torch.equal(film_modulate(z, torch.ones_like(z), torch.zeros_like(z)), z)
        beta = torch.randn(4, 192)
        assert torch.equal(film_modulate(z, torch.zeros_like(z), beta), beta)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            film_modulate(torch.zeros(1, 192), torch.zeros(1, 191), torch.zeros(1, 192))

    def test_generator_shapes_and_near_identity_init(self):
        gamma, beta = FiLMGenerator()(torch.randn(6, 3))
        assert gamma.shape == beta.shape == (6, Z_DIM)
        assert (gamma - 1).abs().max() < 0.1 and beta.abs().max() < 0.1


class TestHead:
    def test_group_norm_of_constant_vector(self):
        head = GroupNormHead().double()
        z = torch.full((2, Z_DIM), 3.7, dtype=torch.float64)
        torch.testing.assert_close(head.norm(z), torch.zeros_like(z), atol=1e-9, rtol=0)

    def test_batch_one_matches_batched(self):
        net = small_net().eval()
        img, x = torch.rand(3, 3, SIZE, SIZE), torch.randn(3, 3)
        full = net(img, x).main_logits
        single = torch.cat([net(img[i:i + 1], x[i:i + 1]).main_logits for i in range(3)])
        torch.testing.assert_close(full, single, atol=1e-5, rtol=1e-5)
        assert full.shape == (3, 4)


class TestForward:
    def test_pyramid_shapes(self):
        net = small_net()
        pyr = net.extract_pyramid(torch.rand(1, 3, SIZE, SIZE))
        assert [tuple(p.shape[1:]) for p in pyr] == [(64, 8, 8), (64, 4, 4), (64, 2, 2)]

    def test_wrong_resolution(self):
        with pytest.raises(ValueError):
            small_net()(torch.rand(1, 3, 32, 32), torch.zeros(1, 3))

    def test_aux_heads_train_only(self):
        net = small_net()
        out = net.train()(torch.rand(2, 3, SIZE, SIZE), torch.randn(2, 3))
        assert len(out.aux_logits) == 2 and out.aux_logits[0].shape == (2, 4)
        assert net.eval()(torch.rand(2, 3, SIZE, SIZE), torch.randn(2, 3)).aux_logits is None
        assert len(out.attention_maps) == 3 and out.gate_values.shape == (3,)

    def test_eval_determinism(self):
        net = small_net().eval()
        img, x = torch.rand(2, 3, SIZE, SIZE), torch.randn(2, 3)
        assert torch.equal(net(img, x).main_logits, net(img, x).main_logits)

    def test_frozen_statistics_same_in_train_and_eval(self):
        enc = make_encoder("tiny_frozen_bn")
        bns = [m for m in enc.modules() if isinstance(m, FrozenBatchNorm2d)]
        assert bns
        with torch.no_grad():
            for bn in bns:
                bn.running_mean.uniform_(-0.5, 0.5)
                bn.running_var.uniform_(0.5, 2.0)
        before = [bn.running_mean.clone() for bn in bns]
        x = torch.rand(4, 3, SIZE, SIZE)
        train_out = enc.train()(x)
        eval_out = enc.eval()(x)
        for a, b in zip(train_out, eval_out):
            assert torch.equal(a, b)
        assert all(torch.equal(b, bn.running_mean) for b, bn in zip(before, bns))

    def test_metadata_changes_attention(self):
        net = small_net().eval()
        img = torch.rand(1, 3, SIZE, SIZE)
        x = torch.tensor([[0.3, -0.5, 1.2]])
        a0 = net(img, x).attention_maps
        a1 = net(img, x + torch.tensor([[0.5, 0.0, 0.0]])).attention_maps
        assert all((p - q).abs().max() > 1e-8 for p, q in zip(a0, a1))

    def test_no_metadata_ablation_ignores_x_tab(self):
        net = small_net(use_metadata=False).eval()
        img = torch.rand(1, 3, SIZE, SIZE)
        assert torch.equal(net(img, torch.zeros(1, 3)).main_logits, net(img, torch.randn(1, 3)).main_logits)


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    net = small_net().double().eval()
    pyr = pyramid(seed)
    x0 = np.random.default_rng(seed).normal(size=(1, 3))
    w = torch.randn(1, 4, dtype=torch.float64)
    v3 = pyr[2].detach().numpy()

    def scalar(x_np, v3_np):
        p = pyr[:2] + [torch.as_tensor(v3_np)]
        with torch.no_grad():
            return float((net.query_forward(p, torch.as_tensor(x_np)).main_logits * w).sum())

    x = torch.tensor(x0, requires_grad=True)
    p3 = pyr[2].clone().requires_grad_(True)
    (net.query_forward(pyr[:2] + [p3], x).main_logits * w).sum().backward()

    num_x = central_difference(lambda a: scalar(a, v3), x0)
    num_v = central_difference(lambda a: scalar(x0, a), v3)
    assert relative_error(x.grad.numpy(), num_x) < 1e-4
    assert relative_error(p3.grad.numpy(), num_v) < 1e-4
