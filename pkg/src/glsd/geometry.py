"""Crop/resize/flip geometry, token back-projection and token matching.

Coordinates are continuous pixels in the original image with the pixel-centre
convention: pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)`` and its centre is
``(j + 0.5, i + 0.5)``. Points are stored as ``(x, y)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GeoParams:
    """Geometric augmentation vector ``[ul_x, ul_y, lr_x, lr_y, h, w, f]``."""

    ul_x: float
    ul_y: float
    lr_x: float
    lr_y: float
    h: int
    w: int
    flip: bool = False

    def __post_init__(self):
        if not (self.ul_x < self.lr_x and self.ul_y < self.lr_y):
            raise ValueError(f"empty crop rectangle: {self}")
        if self.h <= 0 or self.w <= 0:
            raise ValueError("resized shape must be positive")

    @property
    def crop_w(self) -> float:
        return self.lr_x - self.ul_x

    @property
    def crop_h(self) -> float:
        return self.lr_y - self.ul_y

    def as_vector(self) -> np.ndarray:
        return np.array([self.ul_x, self.ul_y, self.lr_x, self.lr_y, self.h, self.w, float(self.flip)])

    def shifted(self, dx: float, dy: float) -> "GeoParams":
        return GeoParams(self.ul_x + dx, self.ul_y + dy, self.lr_x + dx, self.lr_y + dy,
                         self.h, self.w, self.flip)

    def check_inside(self, height: int, width: int, tol: float = 1e-9) -> None:
        if (self.ul_x < -tol or self.ul_y < -tol
                or self.lr_x > width + tol or self.lr_y > height + tol):
            raise ValueError(f"crop {self} lies outside a {height}x{width} image")

    @classmethod
    def full(cls, height: int, width: int, h: int | None = None, w: int | None = None,
             flip: bool = False) -> "GeoParams":
        return cls(0.0, 0.0, float(width), float(height), h or height, w or width, flip)


@dataclass(frozen=True)
class PosEncoding:
    """Token centres in original-image pixels, row-major over the token grid.

    ``diag`` is the length of one token footprint's diagonal, also in
    original-image pixels.
    """

    centers: np.ndarray
    grid: tuple[int, int]
    diag: float

    def __post_init__(self):
        if self.centers.shape != (self.grid[0] * self.grid[1], 2):
            raise ValueError("centers do not match the grid shape")

    def __len__(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class Matching:
    """Source-to-target token assignment.

    ``distance`` holds pixel distances for geometric matchings and achieved
    cosine similarities for similarity matchings; ``threshold_s`` is ``None``
    for the latter.
    """

    target: np.ndarray
    distance: np.ndarray
    mask: np.ndarray
    threshold_s: float | None = None
    n_targets: int = field(default=0)

    def __len__(self) -> int:
        return len(self.target)

    def to_json(self, view_a: int, view_b: int) -> str:
        return json.dumps({
            "view_a": view_a,
            "view_b": view_b,
            "targets": [int(t) for t in self.target],
            "distances": [float(d) for d in self.distance],
            "mask": [bool(m) for m in self.mask],
            "s": None if self.threshold_s is None else float(self.threshold_s),
            "n_targets": int(self.n_targets),
        })

    @classmethod
    def from_json(cls, line: str) -> tuple[int, int, "Matching"]:
        rec = json.loads(line)
        m = cls(
            target=np.asarray(rec["targets"], dtype=np.int64),
            distance=np.asarray(rec["distances"], dtype=np.float64),
            mask=np.asarray(rec["mask"], dtype=bool),
            threshold_s=rec["s"],
            n_targets=rec.get("n_targets", 0),
        )
        return rec["view_a"], rec["view_b"], m


def check_divisible(g: GeoParams, r: int) -> tuple[int, int]:
    if r <= 0:
        raise ValueError("downscale factor must be a positive integer")
    if g.h % r or g.w % r:
        raise ValueError(f"view size {g.h}x{g.w} is not divisible by {r}")
    return g.h // r, g.w // r


# ---------------------------------------------------------------------------
# image-space


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` on the separable grid ``ys x xs`` (continuous pixel
    indices, centre of pixel ``i`` at ``i``), clamping at the edges."""
    H, W = image.shape[:2]
    ys = np.clip(ys, 0.0, H - 1)
    xs = np.clip(xs, 0.0, W - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if image.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    rows = image[y0] * (1.0 - fy) + image[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def apply_geometric(image: np.ndarray, g: GeoParams) -> np.ndarray:
    """Crop the rectangle, bilinearly resize it to ``h x w``, mirror iff ``flip``."""
    H, W = image.shape[:2]
    g.check_inside(H, W)
    xs = g.ul_x + (np.arange(g.w) + 0.5) * (g.crop_w / g.w) - 0.5
    ys = g.ul_y + (np.arange(g.h) + 0.5) * (g.crop_h / g.h) - 0.5
    out = bilinear_sample(np.asarray(image, dtype=np.float64), ys, xs)
    if g.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# token geometry


def view_centers(g: GeoParams, r: int) -> np.ndarray:
    """Token centres in the resized view frame, ``(K, 2)`` as ``(x, y)``."""
    ht, wt = check_divisible(g, r)
    jj, ii = np.meshgrid(np.arange(wt), np.arange(ht))
    return np.stack([(jj.ravel() + 0.5) * r, (ii.ravel() + 0.5) * r], axis=1).astype(np.float64)


def view_to_original(g: GeoParams, xy: np.ndarray) -> np.ndarray:
    x = xy[..., 0]
    y = xy[..., 1]
    if g.flip:
        x = g.w - x
    return np.stack([g.ul_x + (x / g.w) * g.crop_w, g.ul_y + (y / g.h) * g.crop_h], axis=-1)


def original_to_view(g: GeoParams, xy: np.ndarray) -> np.ndarray:
    x = (xy[..., 0] - g.ul_x) / g.crop_w * g.w
    y = (xy[..., 1] - g.ul_y) / g.crop_h * g.h
    if g.flip:
        x = g.w - x
    return np.stack([x, y], axis=-1)


def diag_length(g: GeoParams, r: int) -> float:
    ht, wt = check_divisible(g, r)
    step_x = g.crop_w / wt
    step_y = g.crop_h / ht
    return float(np.sqrt(step_x * step_x + step_y * step_y))


def token_centers(g: GeoParams, r: int) -> PosEncoding:
    """Back-project every token centre of the view into original-image pixels."""
    grid = check_divisible(g, r)
    centers = view_to_original(g, view_centers(g, r))
    return PosEncoding(centers=centers, grid=grid, diag=diag_length(g, r))


# ---------------------------------------------------------------------------
# matching


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., :, None, 0] - b[..., None, :, 0]
    dy = a[..., :, None, 1] - b[..., None, :, 1]
    return dx * dx + dy * dy


def geometric_match(e: PosEncoding, e_other: PosEncoding) -> Matching:
    """Match every token of ``e`` to the nearest token centre of ``e_other``."""
    if len(e) == 0 or len(e_other) == 0:
        raise ValueError("cannot match empty encodings")
    d2 = _sq_dist(e.centers, e_other.centers)
    target = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(target)), target])
    s = 0.5 * max(e.diag, e_other.diag)
    return Matching(target=target, distance=dist, mask=dist < s, threshold_s=s,
                    n_targets=len(e_other))


def cosine_table(z: np.ndarray, z_other: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z_other = np.asarray(z_other, dtype=np.float64)
    if z.shape[-1] != z_other.shape[-1]:
        raise ValueError("feature dimensions differ")
    na = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    nb = np.sqrt((z_other * z_other).sum(axis=-1, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm row: cosine similarity undefined")
    return (z / na) @ np.swapaxes(z_other / nb, -1, -2)


def similarity_match(z: np.ndarray, z_other: np.ndarray) -> Matching:
    """Match every row of ``z`` to the row of ``z_other`` with highest cosine."""
    if len(z) == 0 or len(z_other) == 0:
        raise ValueError("cannot match empty representations")
    cos = cosine_table(z, z_other)
    target = np.argmax(cos, axis=1)
    best = cos[np.arange(len(target)), target]
    return Matching(target=target, distance=best, mask=np.ones(len(target), dtype=bool),
                    n_targets=len(z_other))


# Batched forms used by the trainer: leading axis indexes images.


def geometric_match_batch(centers: np.ndarray, centers_other: np.ndarray,
                          diag: np.ndarray, diag_other: np.ndarray):
    """Returns ``(target, distance, mask)`` each of shape ``(B, K)``."""
    d2 = _sq_dist(centers, centers_other)
    target = np.argmin(d2, axis=-1)
    dist = np.sqrt(np.take_along_axis(d2, target[..., None], axis=-1)[..., 0])
    s = 0.5 * np.maximum(diag, diag_other)
    return target, dist, dist < s[:, None]


def similarity_match_batch(z: np.ndarray, z_other: np.ndarray):
    """Returns ``(target, cosine)`` each of shape ``(B, K)``."""
    cos = cosine_table(z, z_other)
    target = np.argmax(cos, axis=-1)
    return target, np.take_along_axis(cos, target[..., None], axis=-1)[..., 0]


def overlap_rect(a: GeoParams, b: GeoParams) -> tuple[float, float, float, float] | None:
    x0, y0 = max(a.ul_x, b.ul_x), max(a.ul_y, b.ul_y)
    x1, y1 = min(a.lr_x, b.lr_x), min(a.lr_y, b.lr_y)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, y0, x1, y1
