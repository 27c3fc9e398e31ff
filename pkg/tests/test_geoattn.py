import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvps.geoattn import (FeatureEncoder, GeoAttentionAdapter, GlobalAttention, LocalAttention,
                          attention_descriptor, build_attention_input, encode_pooled, geometry_code,
                          pool_channels, upsample_attention)


def test_encoder_stride_and_pooling():
    enc = FeatureEncoder(8, 4)
    f = enc(torch.rand(2, 3, 32, 128))
    assert f.shape == (2, 8, 4, 16) and (f >= 0).all()
    p = pool_channels(f)
    assert torch.equal(p[:, 0], f.amax(1)) and torch.allclose(p[:, 1], f.mean(1))
    assert encode_pooled(torch.rand(1, 3, 32, 32), enc, (4, 16)).shape == (1, 2, 4, 16)
    with pytest.raises(ValueError):
        encode_pooled(torch.rand(1, 4, 32, 32), enc)
    z = FeatureEncoder(8, 4, zero_init_final=True)
    assert not z(torch.rand(1, 3, 16, 16)).any()


def test_attention_input_checks_shapes():
    a = torch.zeros(2, 2, 3, 5)
    x = build_attention_input(a, a, torch.zeros(2, 1, 3, 5), torch.zeros(2, 3, 3, 5))
    assert x.shape == (2, 8, 3, 5)
    with pytest.raises(ValueError, match="orient"):
        build_attention_input(a, a, torch.zeros(2, 1, 3, 5), torch.zeros(2, 3, 3, 4))


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 9), st.integers(0, 1000))
@settings(max_examples=25)
def test_local_attention_is_distribution(B, h, w, seed):
    torch.manual_seed(seed)
    la = LocalAttention(4)
    x = torch.randn(B, 8, h, w) * 5
    a = la(x)
    assert a.shape == (B, h, w) and (a >= 0).all()
    torch.testing.assert_close(a.sum((1, 2)), torch.ones(B), atol=1e-5, rtol=0)


def test_local_attention_softmax_oracle():
    torch.manual_seed(0)
    la = LocalAttention(4)
    x = torch.randn(1, 8, 3, 4)
    z = la.logits(x)[0].detach().double().numpy()
    e = np.exp(z - z.max())
    np.testing.assert_allclose(la(x)[0].detach().double().numpy(), e / e.sum(), atol=1e-6)


def test_descriptor_matches_loop_oracle(rng):
    f = rng.normal(size=(2, 3, 4, 5))
    w = rng.random((2, 4, 5))
    got = attention_descriptor(torch.tensor(f), torch.tensor(w)).numpy()
    want = np.zeros((2, 3))
    for b in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    want[b, c] += f[b, c, i, j] * w[b, i, j]
    np.testing.assert_allclose(got, want, atol=1e-12)
    with pytest.raises(ValueError):
        attention_descriptor(torch.zeros(2, 3, 4, 5), torch.zeros(2, 4, 4))


def test_descriptor_of_uniform_map_is_channel_mean():
    f = torch.rand(1, 6, 4, 8)
    w = torch.full((1, 4, 8), 1 / 32)
    torch.testing.assert_close(attention_descriptor(f, w), f.mean((2, 3)))


def test_upsample_keeps_constant_map():
    u = upsample_attention(torch.full((1, 2, 3), 0.25), (8, 12))
    assert u.shape == (1, 8, 12) and torch.allclose(u, torch.tensor(0.25))


def test_geometry_code():
    g = geometry_code(torch.tensor([1.5, 0.0]), torch.tensor([90.0, 180.0]))
    torch.testing.assert_close(g, torch.tensor([[1.5, 1.0, 0.0], [0.0, 0.0, -1.0]]), atol=1e-6, rtol=0)


def _global(seed=0, C=5):
    torch.manual_seed(seed)
    return GlobalAttention(C, grid=4, out_size=16)


def test_global_range_shape_and_mask_padding():
    g = _global()
    d, geo = torch.randn(3, 4, 5), torch.randn(3, 4, 3)
    out = g(d, geo)
    assert out.shape == (3, 16, 16) and (out > 0).all() and (out < 1).all()
    # padding with masked slots leaves the output unchanged
    dpad = torch.cat([d, torch.randn(3, 2, 5) * 100], 1)
    gpad = torch.cat([geo, torch.randn(3, 2, 3)], 1)
    mask = torch.tensor([[True] * 4 + [False] * 2] * 3)
    torch.testing.assert_close(g(dpad, gpad, mask), out)
    with pytest.raises(ValueError, match="at least one"):
        g(d, geo, torch.zeros(3, 4, dtype=torch.bool))


def test_global_extreme_logits_stay_open_interval():
    g = _global()
    g.eval()
    with torch.no_grad():
        g.affine.weight.fill_(1e4)
    out = g(torch.randn(2, 3, 5), torch.randn(2, 3, 3))
    assert (out > 0).all() and (out < 1).all()


@given(st.permutations(list(range(5))))
@settings(max_examples=10)
def test_global_permutation_invariant(perm):
    g = _global()
    g.eval()
    torch.manual_seed(1)
    d, geo = torch.randn(2, 5, 5), torch.randn(2, 5, 3)
    torch.testing.assert_close(g(d[:, perm], geo[:, perm]), g(d, geo), atol=1e-6, rtol=1e-5)


def test_adapter_shapes_and_determinism():
    torch.manual_seed(0)
    ad = GeoAttentionAdapter(8, 4, 4, 4, 32)
    B, N, H, W = 2, 3, 32, 128
    args = (torch.rand(B, N, 3, H, W), torch.ones(B, N, dtype=torch.bool), torch.rand(B, 3, 32, 32),
            torch.rand(B, N), torch.rand(B, N) * 360, torch.randn(B, N, 3, 4, 16))
    ad.eval()
    local, desc, glob = ad(*args)
    assert local.shape == (B, N, 4, 16) and desc.shape == (B, N, 8) and glob.shape == (B, 32, 32)
    torch.testing.assert_close(local.sum((2, 3)), torch.ones(B, N))
    local2, _, glob2 = ad(*args)
    assert torch.equal(local, local2) and torch.equal(glob, glob2)
    bad = list(args)
    bad[-1] = torch.randn(B, N, 3, 4, 8)
    with pytest.raises(ValueError, match="orientation grid"):
        ad(*bad)


def test_adapter_gradients_reach_both_encoders():
    torch.manual_seed(0)
    ad = GeoAttentionAdapter(8, 4, 4, 4, 16)
    local, _, glob = ad(torch.rand(2, 2, 3, 16, 64), torch.ones(2, 2, dtype=torch.bool), torch.rand(2, 3, 16, 16),
                        torch.rand(2, 2), torch.rand(2, 2) * 360, torch.randn(2, 2, 3, 2, 8))
    (glob.square().sum() + (local * torch.randn_like(local)).sum()).backward()
    for mod in (ad.pano_encoder, ad.sat_encoder, ad.local, ad.glob):
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in mod.parameters())
