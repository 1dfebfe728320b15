"""Augmentation sampling and the multi-crop view generator.

Every view owns a child stream spawned from one ``SeedSequence``, so a view set
is a pure function of ``(image, config, seed)`` on any platform (PCG64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import GeoParams, apply_geometric, check_divisible

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PhotoParams:
    jitter: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False
    blur: bool = False
    blur_sigma: float = 0.0
    solarize: bool = False
    solarize_threshold: float = 0.5

    @classmethod
    def identity(cls) -> "PhotoParams":
        return cls()


@dataclass(frozen=True)
class AugDistribution:
    """Distribution over one kind of view (first global, second global, local)."""

    size: tuple[int, int] = (64, 64)
    scale: tuple[float, float] = (0.4, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 0.6)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid crop-area range {self.scale}")
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ValueError(f"invalid aspect-ratio range {self.ratio}")


def _dino_global_1(size: int) -> AugDistribution:
    return AugDistribution(size=(size, size), scale=(0.4, 1.0), blur_prob=1.0, solarize_prob=0.0)


def _dino_global_2(size: int) -> AugDistribution:
    return AugDistribution(size=(size, size), scale=(0.4, 1.0), blur_prob=0.1, solarize_prob=0.2)


def _dino_local(size: int) -> AugDistribution:
    return AugDistribution(size=(size, size), scale=(0.05, 0.4), blur_prob=0.5, solarize_prob=0.0)


@dataclass(frozen=True)
class MultiCropConfig:
    global_size: int = 64
    local_size: int = 32
    n_local: int = 8
    patch: int = 16
    global_1: AugDistribution | None = None
    global_2: AugDistribution | None = None
    local: AugDistribution | None = None
    photometric: bool = True

    def __post_init__(self):
        if self.global_size % self.patch or self.local_size % self.patch:
            raise ValueError("view sizes must be divisible by the patch size")
        if self.n_local < 0:
            raise ValueError("n_local must be non-negative")
        if self.global_1 is None:
            object.__setattr__(self, "global_1", _dino_global_1(self.global_size))
        if self.global_2 is None:
            object.__setattr__(self, "global_2", _dino_global_2(self.global_size))
        if self.local is None:
            object.__setattr__(self, "local", _dino_local(self.local_size))

    @property
    def n_views(self) -> int:
        return 2 + self.n_local

    def distributions(self) -> list[AugDistribution]:
        return [self.global_1, self.global_2] + [self.local] * self.n_local


@dataclass(frozen=True)
class View:
    image: np.ndarray
    geo: GeoParams
    photo: PhotoParams
    is_global: bool


@dataclass(frozen=True)
class ViewSet:
    views: list[View] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i) -> View:
        return self.views[i]

    @property
    def n_local(self) -> int:
        return len(self.views) - 2

    def to_bytes(self) -> bytes:
        parts = []
        for v in self.views:
            parts.append(np.ascontiguousarray(v.image, dtype="<f8").tobytes())
            parts.append(v.geo.as_vector().astype("<f8").tobytes())
            parts.append(repr(v.photo).encode())
        return b"".join(parts)


# ---------------------------------------------------------------------------
# sampling


def sample_geo(dist: AugDistribution, rng: np.random.Generator,
               image_dims: tuple[int, int]) -> GeoParams:
    """Random-resized-crop with flip; up to 10 tries, then a centre crop."""
    H, W = image_dims
    area = float(H * W)
    log_ratio = (math.log(dist.ratio[0]), math.log(dist.ratio[1]))
    h_out, w_out = dist.size
    for _ in range(10):
        target = area * rng.uniform(dist.scale[0], dist.scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = math.sqrt(target * aspect)
        ch = math.sqrt(target / aspect)
        if 0 < cw <= W and 0 < ch <= H:
            x0 = rng.uniform(0.0, W - cw)
            y0 = rng.uniform(0.0, H - ch)
            break
    else:
        in_ratio = W / H
        if in_ratio < dist.ratio[0]:
            cw, ch = float(W), W / dist.ratio[0]
        elif in_ratio > dist.ratio[1]:
            ch, cw = float(H), H * dist.ratio[1]
        else:
            cw, ch = float(W), float(H)
        x0, y0 = (W - cw) / 2.0, (H - ch) / 2.0
    flip = bool(rng.uniform() < dist.flip_prob)
    return GeoParams(x0, y0, min(x0 + cw, float(W)), min(y0 + ch, float(H)), h_out, w_out, flip)


def sample_photo(dist: AugDistribution, rng: np.random.Generator) -> PhotoParams:
    # fixed draw order keeps streams aligned regardless of which flags fire
    jitter = bool(rng.uniform() < dist.jitter_prob)
    b = rng.uniform(max(0.0, 1 - dist.brightness), 1 + dist.brightness)
    c = rng.uniform(max(0.0, 1 - dist.contrast), 1 + dist.contrast)
    s = rng.uniform(max(0.0, 1 - dist.saturation), 1 + dist.saturation)
    gray = bool(rng.uniform() < dist.gray_prob)
    blur = bool(rng.uniform() < dist.blur_prob)
    sigma = rng.uniform(*dist.blur_sigma)
    sol = bool(rng.uniform() < dist.solarize_prob)
    return PhotoParams(
        jitter=jitter, brightness=b, contrast=c, saturation=s,
        grayscale=gray, blur=blur, blur_sigma=sigma if blur else 0.0,
        solarize=sol, solarize_threshold=dist.solarize_threshold,
    )


# ---------------------------------------------------------------------------
# photometric pipeline


def grayscale(image: np.ndarray) -> np.ndarray:
    return image @ LUMA


def apply_photometric(image: np.ndarray, p: PhotoParams) -> np.ndarray:
    """Jitter, then grayscale, blur and solarize, each iff its flag is set."""
    out = np.asarray(image, dtype=np.float64)
    if p.jitter:
        out = np.clip(out * p.brightness, 0.0, 1.0)
        m = grayscale(out).mean()
        out = np.clip((out - m) * p.contrast + m, 0.0, 1.0)
        g = grayscale(out)[..., None]
        out = np.clip(g + (out - g) * p.saturation, 0.0, 1.0)
    if p.grayscale:
        out = np.repeat(grayscale(out)[..., None], out.shape[-1], axis=-1)
    if p.blur and p.blur_sigma > 0:
        sig = (p.blur_sigma, p.blur_sigma, 0.0) if out.ndim == 3 else p.blur_sigma
        out = gaussian_filter(out, sigma=sig, mode="reflect", truncate=4.0)
    if p.solarize:
        out = np.where(out >= p.solarize_threshold, 1.0 - out, out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# view sets


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_rngs(seed, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in _seed_seq(seed).spawn(n)]


def make_view(image: np.ndarray, dist: AugDistribution, rng: np.random.Generator,
              is_global: bool, photometric: bool = True) -> View:
    geo = sample_geo(dist, rng, image.shape[:2])
    photo = sample_photo(dist, rng) if photometric else PhotoParams.identity()
    return View(apply_photometric(apply_geometric(image, geo), photo), geo, photo, is_global)


def make_views(image: np.ndarray, config: MultiCropConfig, seed) -> ViewSet:
    """Two global views (one per global distribution) followed by ``n_local`` locals."""
    rngs = child_rngs(seed, config.n_views)
    views = [
        make_view(image, dist, rng, is_global=i < 2, photometric=config.photometric)
        for i, (dist, rng) in enumerate(zip(config.distributions(), rngs))
    ]
    return ViewSet(views)


def make_eval_pair(image: np.ndarray, config: MultiCropConfig, seed,
                   same_photo: bool = False) -> tuple[View, View]:
    """Two views sharing one crop but with independent photometrics."""
    rng_geo, rng_a, rng_b = child_rngs(seed, 3)
    dist = config.global_1
    geo = sample_geo(dist, rng_geo, image.shape[:2])
    base = apply_geometric(image, geo)
    if config.photometric:
        pa = sample_photo(dist, rng_a)
        pb = pa if same_photo else sample_photo(dist, rng_b)
    else:
        pa = pb = PhotoParams.identity()
    return (View(apply_photometric(base, pa), geo, pa, True),
            View(apply_photometric(base, pb), geo, pb, True))


def center_crop(image_dims: tuple[int, int], size: int, fraction: float = 0.875) -> GeoParams:
    """Square centre crop covering ``fraction`` of the shorter side, resized to ``size``."""
    H, W = image_dims
    side = fraction * min(H, W)
    x0, y0 = (W - side) / 2.0, (H - side) / 2.0
    return GeoParams(x0, y0, x0 + side, y0 + side, size, size, False)


def with_sizes(config: MultiCropConfig, **changes) -> MultiCropConfig:
    """Copy of ``config`` with new sizes; default distributions are rebuilt."""
    base = replace(config, global_1=None, global_2=None, local=None, **changes)
    return base


def grid_of(dist: AugDistribution, patch: int) -> tuple[int, int]:
    return check_divisible(GeoParams(0, 0, 1, 1, dist.size[0], dist.size[1]), patch)
