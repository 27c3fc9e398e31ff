"""Base UNet alone (no control branches) on one rendered latent: noise-MSE ratio after N steps per lr.

This is the calibration run behind the 200-step single-sample threshold.
"""

import argparse
import time

import torch

from mvps.config import PRESETS
from mvps.diffcore import NoiseSchedule, TextEmbedder, UNet
from mvps.diffcore.codec import BlockDCTCodec, image_to_tensor
from mvps.synthworld import RenderSettings, generate_scene, render_panorama, scene_to_geo


def run(cfg, lr, steps, batch=4):
    scene = generate_scene(0)
    img = render_panorama(scene, scene_to_geo(scene, 0.0, 0.0), RenderSettings(pano_size=cfg.image_size))
    x0 = BlockDCTCodec(cfg.codec.channels).encode(image_to_tensor(img)) * cfg.codec.scale
    torch.manual_seed(0)
    d = cfg.denoiser
    unet, sched = UNet(d), NoiseSchedule()
    emb, mask = TextEmbedder(d.text_vocab, d.text_width, d.text_max_len)(["a"])
    emb = emb.detach()
    opt = torch.optim.AdamW(unet.parameters(), lr=lr, weight_decay=0.01)

    def noise_mse(g, B):
        t = torch.randint(1, sched.T, (B,), generator=g)
        n = torch.randn(B, *x0.shape[1:], generator=g)
        return (unet(sched.q_sample(x0.expand(B, -1, -1, -1), t, n), t, emb.expand(B, -1, -1),
                     mask.expand(B, -1)) - n).pow(2).mean()

    def evaluate():
        with torch.no_grad():
            return float(noise_mse(torch.Generator().manual_seed(5), 32))

    before, g = evaluate(), torch.Generator().manual_seed(1)
    for _ in range(steps):
        loss = noise_mse(g, batch)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(unet.parameters(), 1.0)
        opt.step()
    return before, evaluate()


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, nargs="+", default=[1e-3, 3e-3, 6e-3])
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = PRESETS[args.preset]()
    for lr in args.lr:
        t0 = time.time()
        before, after = run(cfg, lr, args.steps)
        print(f"lr {lr:g}: {before:.3f} -> {after:.3f} (ratio {after / before:.3f}) in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
