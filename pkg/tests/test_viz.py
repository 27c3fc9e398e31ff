import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvps.geo import GeoLocation, OverheadFrame, enu_to_geo
from mvps.model import build_model
from mvps.viz import (PANO_COLORS, TARGET_COLOR, add_border, darkness, draw_disc, draw_square, jet, marker_pixel,
                      normalize, resize_map, visualize_attention)

FRAME = OverheadFrame(GeoLocation(40.0, -75.0), gsd=0.5, size=64)


def test_colormaps_run_blue_to_red_and_white_to_dark():
    assert tuple(jet(0.0)) == (0, 0, 128) and tuple(jet(1.0)) == (128, 0, 0)
    ramp = jet(np.linspace(0, 1, 50))
    assert ramp[:10, 2].mean() > ramp[:10, 0].mean() and ramp[-10:, 0].mean() > ramp[-10:, 2].mean()
    assert tuple(darkness(0.0)) == (255, 255, 255) and tuple(darkness(1.0)) == (170, 20, 20)
    assert (np.diff(darkness(np.linspace(0, 1, 20)).astype(int).sum(-1)) <= 0).all()


def test_normalize_and_resize():
    assert normalize(np.full((3, 3), 2.0)).max() == 0.0
    n = normalize(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert n.min() == 0.0 and n.max() == 1.0
    assert resize_map(np.ones((4, 16)), (32, 128)).shape == (32, 128)
    assert np.allclose(resize_map(np.full((4, 16), 0.25), (8, 32)), 0.25)


@given(st.floats(-15.9, 15.9), st.floats(-15.9, 15.9))
def test_marker_pixel_within_one_pixel_of_geometry(east, north):
    loc = enu_to_geo(east, north, FRAME.center)
    r, c, inside = marker_pixel(loc, FRAME)
    # independent oracle: pixel centre grid with north up and (0, 0) at the north-west corner
    want_r, want_c = FRAME.size / 2 - north / FRAME.gsd, FRAME.size / 2 + east / FRAME.gsd
    assert abs(r - want_r) <= 1 and abs(c - want_c) <= 1 and inside


def test_marker_pixel_outside_frame():
    assert not marker_pixel(enu_to_geo(40.0, 0.0, FRAME.center), FRAME)[2]
    r, c, inside = marker_pixel(FRAME.center, FRAME)
    assert (r, c, inside) == (32, 32, True)


def test_drawing_primitives():
    img = np.zeros((20, 20, 3), np.uint8)
    draw_disc(img, 10, 10, 3, (1, 2, 3))
    assert tuple(img[10, 10]) == (1, 2, 3) and tuple(img[10, 13]) == (1, 2, 3) and not img[10, 14].any()
    draw_square(img, 2, 2, 4, (9, 9, 9))  # clipped at the border without error
    assert tuple(img[6, 0]) == (9, 9, 9)
    b = add_border(np.zeros((6, 6, 3), np.uint8), (5, 5, 5), width=1)
    assert b[0].all() and b[:, -1].all() and not b[1:-1, 1:-1].any()


def test_visualize_attention_outputs(tiny_cfg, tiny_records, tmp_path):
    model = build_model(tiny_cfg)
    rec = tiny_records[0]
    side = visualize_attention(model, rec, tmp_path, scale=2)
    assert json.loads((tmp_path / "attention.json").read_text()) == json.loads(json.dumps(side))
    assert [e["name"] for e in side["local"]] == ["pano_1", "pano_2"]
    for e, color in zip(side["local"], PANO_COLORS):
        raw = np.load(tmp_path / e["raw"])
        assert raw.shape == tuple(tiny_cfg.feature_grid) and raw.sum() == pytest.approx(1.0, abs=1e-5)
        assert e["color"] == color
    g = np.load(tmp_path / "global.npy")
    assert g.shape == (32, 32) and 0 < g.min() <= g.max() < 1
    assert side["markers"]["target"]["color"] == TARGET_COLOR and side["markers"]["target"]["in_frame"]
