import re
import struct
import zlib

import numpy as np
from hypothesis import given, strategies as st

from glsd.geometry import GeoParams, geometric_match, token_centers
from glsd.viz import layout, match_views, png_bytes, render_svg, segments


def _image(size=96):
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.stack([xx, yy, 0.5 * np.ones_like(xx)], axis=-1)


def _geo_match(a, b, r=16):
    return geometric_match(token_centers(a, r), token_centers(b, r))


def test_identical_crops_parallel_unmasked():
    g = GeoParams(8, 8, 72, 72, 64, 64, False)
    segs = segments(g, g, _geo_match(g, g), 16)
    assert len(segs) == 16 and not any(s.masked for s in segs)
    dx = {round(s.x2 - s.x1, 9) for s in segs}
    dy = {round(s.y2 - s.y1, 9) for s in segs}
    assert dx == {layout(g)[0]} and dy == {0.0}


def test_disjoint_crops_all_dashed():
    a = GeoParams(0, 0, 40, 40, 64, 64, False)
    b = GeoParams(50, 50, 90, 90, 64, 64, False)
    svg = render_svg(np.zeros((64, 64, 3)), np.zeros((64, 64, 3)), a, b, _geo_match(a, b), 16)
    lines = re.findall(r"<line [^>]*/>", svg)
    assert len(lines) == 16
    assert all('stroke-dasharray="4 3"' in l and 'class="masked"' in l for l in lines)


crop = st.tuples(st.floats(0, 40), st.floats(0, 40), st.floats(20, 56), st.booleans())


@given(crop, crop)
def test_endpoints_coordinate_oracle(ca, cb):
    ga = GeoParams(ca[0], ca[1], ca[0] + ca[2], ca[1] + ca[2], 64, 64, ca[3])
    gb = GeoParams(cb[0], cb[1], cb[0] + cb[2], cb[1] + cb[2], 32, 32, cb[3])
    m = _geo_match(ga, gb)
    scale, gap = 3.0, 10.0
    ea, eb = token_centers(ga, 16).centers, token_centers(gb, 16).centers

    def to_fig(g, xy, ox):
        # invert the crop affine by hand: original pixels -> view pixels
        x = (xy[0] - g.ul_x) / (g.lr_x - g.ul_x) * g.w
        y = (xy[1] - g.ul_y) / (g.lr_y - g.ul_y) * g.h
        if g.flip:
            x = g.w - x
        return x * scale + ox, y * scale

    for s in segments(ga, gb, m, 16, scale, gap):
        x1, y1 = to_fig(ga, ea[s.source], 0.0)
        x2, y2 = to_fig(gb, eb[s.target], 64 * scale + gap)
        assert np.allclose([s.x1, s.y1, s.x2, s.y2], [x1, y1, x2, y2], atol=1e-9)
        assert s.masked == (not m.mask[s.source])


def test_png_structure():
    img = _image(8)
    data = png_bytes(img)
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, chunks = 8, {}
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        tag, body = data[pos + 4:pos + 8], data[pos + 8:pos + 8 + n]
        (crc,) = struct.unpack(">I", data[pos + 8 + n:pos + 12 + n])
        assert crc == zlib.crc32(tag + body) & 0xFFFFFFFF
        chunks[tag] = body
        pos += 12 + n
    w, h = struct.unpack(">II", chunks[b"IHDR"][:8])
    raw = np.frombuffer(zlib.decompress(chunks[b"IDAT"]), np.uint8).reshape(h, 1 + 3 * w)
    assert (w, h) == (8, 8) and not raw[:, 0].any()
    np.testing.assert_array_equal(raw[:, 1:].reshape(8, 8, 3), np.rint(img * 255).astype(np.uint8))


def test_match_views_geometric_and_similarity():
    from glsd.model import BackboneConfig, init_params
    cfg = BackboneConfig(dim=8, head_hidden=8, bottleneck=8, n_prototypes=8)
    g = GeoParams(4, 4, 68, 68, 32, 32, False)
    img = _image()
    va, vb, m = match_views(img, g, g, "geometric", 16)
    assert va.shape == (32, 32, 3) and m.target.tolist() == [0, 1, 2, 3]
    _, _, ms = match_views(img, g, g, "similarity", 16, init_params(cfg, 0), cfg)
    assert ms.target.tolist() == [0, 1, 2, 3]
    svg = render_svg(va, vb, g, g, m, 16, title="t")
    assert svg.count("<image ") == 2 and svg.startswith("<?xml")
