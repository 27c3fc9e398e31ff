"""Round-trip PSNR of the block-DCT latent codec versus kept channels, on rendered panoramas.

Used to pick codec.channels: it must stay <= denoiser.base_channels and keep >= 30 dB.
"""

import argparse

import numpy as np

from mvps.diffcore import AreaLatentCodec, BlockDCTCodec, decode_latent, encode_latent
from mvps.metrics import psnr
from mvps.synthworld import RenderSettings, generate_scene, render_panorama, sample_street_point, scene_to_geo


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--height", type=int, action="append", help="panorama height (repeatable); width is 4x")
    p.add_argument("--n", type=int, default=20, help="panoramas per size")
    p.add_argument("--channels", type=int, nargs="+", default=[6, 9, 12, 18, 24, 30, 36, 48])
    args = p.parse_args()

    for H in args.height or [32, 64]:
        rs = RenderSettings(pano_size=(H, 4 * H))
        imgs = []
        for k in range(args.n):
            scene = generate_scene(100 + k)
            e, n = sample_street_point(scene, np.random.default_rng(k))
            imgs.append(render_panorama(scene, scene_to_geo(scene, e, n), rs))
        codecs = [("area", AreaLatentCodec(4))] + [(f"dct{c}", BlockDCTCodec(c)) for c in args.channels]
        print(f"{H}x{4 * H}")
        for name, codec in codecs:
            vals = [psnr(decode_latent(encode_latent(im, codec), codec)[0], im) for im in imgs]
            print(f"  {name:>6}: min {min(vals):6.2f} dB  mean {np.mean(vals):6.2f} dB")


if __name__ == "__main__":
    main()
