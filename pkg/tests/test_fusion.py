import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvps.fusion import (FDN, ConditionEncoder, MultiscaleExtractor, fdn_inject, hadamard_fuse, mask_to_latent,
                         multiscale_extract, spatial_norm, zero_conv)


def test_condition_encoder_downsamples_by_four():
    enc = ConditionEncoder(16)
    assert enc(torch.rand(2, 3, 32, 128)).shape == (2, 16, 8, 32)
    with pytest.raises(ValueError, match="divisible by 4"):
        enc(torch.rand(1, 3, 30, 128))


def test_hadamard_examples():
    f = torch.randn(2, 4, 3, 5)
    assert torch.equal(hadamard_fuse(f, torch.zeros(2, 3, 5)), f)
    torch.testing.assert_close(hadamard_fuse(f, torch.ones(2, 1, 3, 5)), 2 * f)
    m = torch.rand(2, 3, 5)
    torch.testing.assert_close(hadamard_fuse(f, m), f * (1 + m[:, None]))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        hadamard_fuse(f, torch.full((2, 3, 5), 1.5))


@given(st.floats(0, 1), st.floats(-5, 5))
@settings(max_examples=30)
def test_hadamard_gain_bounded(m, v):
    f = torch.full((1, 2, 2, 2), v, dtype=torch.float64)
    out = hadamard_fuse(f, torch.full((1, 2, 2), m, dtype=torch.float64))
    assert abs(float(out[0, 0, 0, 0])) <= 2 * abs(v) + 1e-12
    assert abs(float(out[0, 0, 0, 0])) >= abs(v) - 1e-12


def test_mask_to_latent():
    m = torch.rand(2, 4, 16)
    assert mask_to_latent(m, (4, 16)).shape == (2, 1, 4, 16)
    assert torch.equal(mask_to_latent(m, (4, 16))[:, 0], m)
    assert mask_to_latent(m, (8, 32)).shape == (2, 1, 8, 32)


def test_spatial_norm_statistics():
    z = torch.randn(2, 3, 6, 7, dtype=torch.float64) * 4 + 3
    n = spatial_norm(z, eps=0.0)
    torch.testing.assert_close(n.mean((2, 3)), torch.zeros(2, 3, dtype=torch.float64), atol=1e-10, rtol=0)
    torch.testing.assert_close(n.var((2, 3), unbiased=False), torch.ones(2, 3, dtype=torch.float64))


def test_fdn_zero_condition_is_plain_norm():
    torch.manual_seed(0)
    fdn = FDN(6, 4)
    z = torch.randn(2, 4, 5, 5)
    c = torch.zeros(2, 6, 5, 5)
    torch.testing.assert_close(fdn(z, c), spatial_norm(z))
    assert not fdn.modulation(z, c).any()
    with pytest.raises(ValueError, match="not aligned"):
        fdn_inject(z, torch.zeros(2, 6, 4, 5), fdn)


def test_fdn_matches_manual_formula():
    torch.manual_seed(1)
    fdn = FDN(3, 2)
    z, c = torch.randn(1, 2, 4, 4), torch.randn(1, 3, 4, 4)
    want = spatial_norm(z) * (1 + fdn.conv_gamma(c)) + fdn.conv_beta(c)
    torch.testing.assert_close(fdn(z, c), want)
    torch.testing.assert_close(fdn.modulation(z, c), want - spatial_norm(z))


def test_extractor_zero_at_init_but_trainable():
    torch.manual_seed(0)
    ex = MultiscaleExtractor(8, (4, 8, 8, 16))
    out = multiscale_extract(torch.randn(2, 8, 8, 32), ex, [(4, 8, 32), (8, 4, 16), (8, 2, 8), (16, 1, 4)])
    assert all(not t.any() for t in out)
    sum(t.sum() for t in out).backward()
    assert all(z.weight.grad.abs().sum() > 0 for z in ex.zeros)
    with pytest.raises(ValueError, match="do not match"):
        multiscale_extract(torch.randn(1, 8, 8, 32), ex, [(4, 8, 32)] * 4)
    with pytest.raises(ValueError, match="four levels"):
        MultiscaleExtractor(8, (4, 8))


def test_extractor_accepts_list():
    ex = MultiscaleExtractor(6, (2, 2, 2, 2))
    parts = [torch.randn(1, 3, 8, 8), torch.randn(1, 3, 8, 8)]
    assert [t.shape[-1] for t in ex(parts)] == [8, 4, 2, 1]


def test_zero_conv():
    zc = zero_conv(3, 5)
    assert not zc(torch.randn(1, 3, 2, 2)).any()
