import pytest
import torch
from _toys import finite_difference_agreement, perturb_zero_convs, random_bundles, toy_denoiser_cfg, toy_stack

from mvps.diffcore import INJECTION_BLOCKS, DenoiserConfig, UNet, base_unet_forward, controlled_forward


def inputs(cfg, text, B=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(B, cfg.latent_channels, *cfg.latent_size, generator=g, dtype=dtype)
    t = torch.randint(0, 1000, (B,), generator=g)
    emb, mask = text(["a street", ""][:B] + ["x"] * max(0, B - 2))
    return x, t, emb, mask, g


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 8"):
        DenoiserConfig(latent_size=(12, 32))
    with pytest.raises(ValueError, match="multipliers"):
        DenoiserConfig(channel_mult=(1, 2))


def test_block_shapes_and_injection_points():
    cfg = toy_denoiser_cfg()
    shapes = cfg.encoder_block_shapes()
    assert len(shapes) == 12
    assert shapes[0] == (8, 8, 32) and shapes[3] == (8, 4, 16) and shapes[11] == (16, 1, 4)
    assert [shapes[b - 1][1] for b in INJECTION_BLOCKS] == [8, 4, 2, 1]


def test_encoder_features_match_declared_shapes():
    cfg, unet, _, text = toy_stack(0)
    x, t, emb, mask, _ = inputs(cfg, text)
    feats, m = unet.encoder(x, unet.temb(t), emb, mask)
    assert [tuple(f.shape[1:]) for f in feats] == cfg.encoder_block_shapes()
    assert m.shape[1:] == feats[-1].shape[1:]


def test_output_shape_and_determinism():
    cfg, unet, _, text = toy_stack(0)
    unet.eval()
    x, t, emb, mask, _ = inputs(cfg, text)
    with torch.no_grad():
        a = unet(x, t, emb, mask)
        b = unet(x, t, emb, mask)
    assert a.shape == x.shape and torch.equal(a, b)


def test_input_errors():
    cfg, unet, branches, text = toy_stack(1)
    x, t, emb, mask, _ = inputs(cfg, text)
    with pytest.raises(ValueError, match="x_t has shape"):
        unet(x[:, :3], t, emb, mask)
    with pytest.raises(ValueError, match="length-2"):
        unet(x, t[:1], emb, mask)
    with pytest.raises(ValueError, match="branches"):
        controlled_forward(unet, x, t, emb, mask, branches, [])
    with pytest.raises(ValueError, match="injection maps"):
        controlled_forward(unet, x, t, emb, mask, branches, [[torch.zeros(1)]])
    with pytest.raises(ValueError, match=r"\[1, 12\]"):
        unet(x, t, emb, mask, ablate_skip=13)


@pytest.mark.parametrize("j", range(1, 13))
def test_every_skip_influences_output(j):
    cfg, unet, _, text = toy_stack(0)
    x, t, emb, mask, _ = inputs(cfg, text)
    with torch.no_grad():
        full = unet(x, t, emb, mask)
        ablated = unet(x, t, emb, mask, ablate_skip=j)
    assert (full - ablated).abs().max() > 0


def test_zero_init_identity():
    cfg, unet, branches, text = toy_stack(3)
    for seed in range(5):
        x, t, emb, mask, g = inputs(cfg, text, seed=seed)
        bundles = random_bundles(cfg, 3, 2, g)
        with torch.no_grad():
            base = base_unet_forward(unet, x, t, emb, mask)
            ctrl = controlled_forward(unet, x, t, emb, mask, branches, bundles)
        assert (ctrl - base).abs().max() < 1e-6


def test_branch_perturbation_changes_output():
    cfg, unet, branches, text = toy_stack(2)
    x, t, emb, mask, g = inputs(cfg, text)
    bundles = random_bundles(cfg, 2, 2, g)
    with torch.no_grad():
        before = controlled_forward(unet, x, t, emb, mask, branches, bundles)
        perturb_zero_convs(branches[:1], g)
        after = controlled_forward(unet, x, t, emb, mask, branches, bundles)
    assert (after - before).abs().max() > 0


def test_one_gradient_step_moves_each_branch():
    cfg, unet, branches, text = toy_stack(2)
    x, t, emb, mask, g = inputs(cfg, text)
    bundles = random_bundles(cfg, 2, 2, g)
    opt = torch.optim.SGD(branches.parameters(), lr=0.1)
    controlled_forward(unet, x, t, emb, mask, branches, bundles).square().mean().backward()
    for b in branches:
        assert b.zero_mid.weight.grad.abs().sum() > 0
    opt.step()
    base = base_unet_forward(unet, x, t, emb, mask)
    for k in range(2):
        zeroed = [bundles[i] if i == k else [torch.zeros_like(c) for c in bundles[i]] for i in range(2)]
        with torch.no_grad():
            out = controlled_forward(unet, x, t, emb, mask, branches[k:k + 1], zeroed[k:k + 1])
        assert (out - base).abs().max() > 0


def test_residuals_are_summed_over_branches():
    cfg, unet, branches, text = toy_stack(2)
    x, t, emb, mask, g = inputs(cfg, text)
    perturb_zero_convs(branches, g)
    bundles = random_bundles(cfg, 2, 2, g)
    with torch.no_grad():
        temb = unet.temb(t)
        feats, m = unet.encoder(x, temb, emb, mask)
        r0, m0 = branches[0](x, temb, emb, mask, bundles[0])
        r1, m1 = branches[1](x, temb, emb, mask, bundles[1])
        manual = unet.decode(feats, m, temb, emb, mask, ([a + b for a, b in zip(r0, r1)], m0 + m1))
        got = controlled_forward(unet, x, t, emb, mask, branches, bundles)
        swapped = controlled_forward(unet, x, t, emb, mask, branches[::-1], bundles[::-1])
    torch.testing.assert_close(got, manual)
    torch.testing.assert_close(swapped, got, atol=1e-5, rtol=1e-5)


def test_gradient_finite_difference():
    cfg, unet, branches, text = toy_stack(2, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    perturb_zero_convs(branches, g)
    x, t, emb, mask, _ = inputs(cfg, text, dtype=torch.float64)
    bundles = random_bundles(cfg, 2, 2, g, torch.float64)
    w = torch.randn(x.shape, generator=g, dtype=torch.float64)
    emb, mask = emb.detach(), mask

    def loss(xx):
        return (controlled_forward(unet, xx, t, emb, mask, branches, bundles) * w).sum()

    assert finite_difference_agreement(loss, x, n_coords=30) >= 0.95


def test_base_unet_overfits_one_sample():
    """Base UNet alone, one rendered latent repeated 4x per step: 200 steps cut noise MSE below 25%."""
    import numpy as np
    from mvps.config import RunConfig
    from mvps.diffcore import NoiseSchedule, TextEmbedder
    from mvps.diffcore.codec import BlockDCTCodec, image_to_tensor
    from mvps.synthworld import RenderSettings, generate_scene, render_panorama, scene_to_geo

    cfg = RunConfig.tiny()
    scene = generate_scene(0)
    img = render_panorama(scene, scene_to_geo(scene, 0.0, 0.0), RenderSettings(pano_size=cfg.image_size))
    x0 = BlockDCTCodec(cfg.codec.channels).encode(image_to_tensor(img)) * cfg.codec.scale
    torch.manual_seed(0)
    unet, sched = UNet(cfg.denoiser), NoiseSchedule()
    emb, mask = TextEmbedder(cfg.denoiser.text_vocab, cfg.denoiser.text_width, cfg.denoiser.text_max_len)(["a"])
    emb = emb.detach()
    opt = torch.optim.AdamW(unet.parameters(), lr=3e-3, weight_decay=0.01)

    def noise_mse(g, B):
        t = torch.randint(1, sched.T, (B,), generator=g)
        n = torch.randn(B, *x0.shape[1:], generator=g)
        xt = sched.q_sample(x0.expand(B, -1, -1, -1), t, n)
        return (unet(xt, t, emb.expand(B, -1, -1), mask.expand(B, -1)) - n).pow(2).mean()

    def evaluate():
        with torch.no_grad():
            return float(noise_mse(torch.Generator().manual_seed(5), 32))

    before, g = evaluate(), torch.Generator().manual_seed(1)
    for _ in range(200):
        loss = noise_mse(g, 4)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(unet.parameters(), 1.0)
        opt.step()
    assert np.isfinite(before) and evaluate() < 0.25 * before
