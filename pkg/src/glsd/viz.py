"""SVG overlays of token matchings between two views of one image.

The two views are drawn side by side (``a`` left, ``b`` right) as embedded PNG
images; each source token of ``a`` gets a line to its matched token in ``b``.
Matchings that the threshold masks out are dashed.
"""

from __future__ import annotations

import base64
import colorsys
import struct
import zlib
from dataclasses import dataclass
from xml.sax.saxutils import quoteattr

import numpy as np

from . import numerics as nx
from .augment import apply_geometric
from .geometry import GeoParams, Matching, geometric_match, similarity_match, token_centers, view_centers


def png_bytes(image: np.ndarray) -> bytes:
    """Encode an ``(H, W, 3)`` float image in ``[0, 1]`` as an 8-bit RGB PNG."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    raw = b"".join(b"\x00" + img[i].tobytes() for i in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


@dataclass(frozen=True)
class Segment:
    x1: float
    y1: float
    x2: float
    y2: float
    masked: bool
    source: int
    target: int


def layout(geo_a: GeoParams, scale: float = 4.0, gap: float = 16.0) -> tuple[float, float]:
    """Figure offsets ``(x, y)`` of view ``b``'s origin."""
    return geo_a.w * scale + gap, 0.0


def segments(geo_a: GeoParams, geo_b: GeoParams, matching: Matching, patch: int,
             scale: float = 4.0, gap: float = 16.0) -> list[Segment]:
    """Segment endpoints in figure coordinates: token centres in each view's
    own frame, scaled, with view ``b`` shifted right of view ``a``."""
    ca = view_centers(geo_a, patch) * scale
    cb = view_centers(geo_b, patch) * scale
    ox, oy = layout(geo_a, scale, gap)
    out = []
    for k, t in enumerate(matching.target):
        out.append(Segment(float(ca[k, 0]), float(ca[k, 1]),
                           float(cb[t, 0] + ox), float(cb[t, 1] + oy),
                           not bool(matching.mask[k]), k, int(t)))
    return out


def _colour(k: int, n: int) -> str:
    r, g, b = colorsys.hsv_to_rgb(k / max(n, 1), 0.85, 0.95)
    return "#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255))


def render_svg(view_a: np.ndarray, view_b: np.ndarray, geo_a: GeoParams, geo_b: GeoParams,
               matching: Matching, patch: int, scale: float = 4.0, gap: float = 16.0,
               title: str | None = None) -> str:
    ox, oy = layout(geo_a, scale, gap)
    width = ox + geo_b.w * scale
    height = max(geo_a.h, geo_b.h) * scale
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{width:g}" height="{height:g}" viewBox="0 0 {width:g} {height:g}">',
    ]
    if title:
        lines.append(f"<title>{title}</title>")
    for img, geo, x0 in ((view_a, geo_a, 0.0), (view_b, geo_b, ox)):
        href = "data:image/png;base64," + base64.b64encode(png_bytes(img)).decode("ascii")
        lines.append(f'<image x="{x0:g}" y="0" width="{geo.w * scale:g}" height="{geo.h * scale:g}" '
                     f'style="image-rendering:pixelated" xlink:href={quoteattr(href)}/>')
    segs = segments(geo_a, geo_b, matching, patch, scale, gap)
    lines.append('<g fill="none" stroke-width="1.5">')
    for s in segs:
        dash = ' stroke-dasharray="4 3" class="masked"' if s.masked else ' class="kept"'
        lines.append(f'<line x1="{s.x1:g}" y1="{s.y1:g}" x2="{s.x2:g}" y2="{s.y2:g}" '
                     f'stroke="{_colour(s.source, len(segs))}"{dash}/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def match_views(image: np.ndarray, geo_a: GeoParams, geo_b: GeoParams, mode: str, patch: int,
                params=None, cfg=None) -> tuple[np.ndarray, np.ndarray, Matching]:
    """Render both crops and match them. ``mode`` is ``geometric`` or
    ``similarity``; the latter needs model ``params`` and ``cfg``."""
    va = apply_geometric(image, geo_a)
    vb = apply_geometric(image, geo_b)
    if mode == "geometric":
        m = geometric_match(token_centers(geo_a, patch), token_centers(geo_b, patch))
    elif mode == "similarity":
        if params is None or cfg is None:
            raise ValueError("similarity overlays need model parameters")
        from .model import forward
        with nx.no_grad():
            _, za = forward(params, va, cfg)
            _, zb = forward(params, vb, cfg)
        m = similarity_match(za.data[0], zb.data[0])
    else:
        raise ValueError(f"unknown overlay mode {mode!r}")
    return va, vb, m
