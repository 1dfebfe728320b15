"""Image ingestion (binary PPM, GLTD) and the synthetic texture dataset."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import gltd

# The first eight families are each closed under horizontal flips; diag and
# antidiag mirror into each other, so they only enter for 9+ classes.
FAMILIES = (
    "hstripes",
    "vstripes",
    "checker",
    "rings",
    "dots",
    "spokes",
    "plaid",
    "blobs",
    "diag",
    "antidiag",
)


# ---------------------------------------------------------------------------
# PPM


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit binary PPM (P6) into an ``(H, W, 3)`` array in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pos += 1
    payload = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    return payload.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    arr = gltd.load(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected an (H, W, C) tensor, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, per_class: int, seed: int = 0) -> "Dataset":
        """Class-balanced subset with ``per_class`` images from every class."""
        rng = np.random.default_rng(seed)
        keep = []
        for c in range(self.n_classes):
            idx = np.flatnonzero(self.labels == c)
            if len(idx) < per_class:
                raise ValueError(f"class {c} has only {len(idx)} images")
            keep.append(np.sort(rng.choice(idx, per_class, replace=False)))
        order = np.sort(np.concatenate(keep))
        return Dataset(self.images[order], self.labels[order])


def save_dataset(out_dir: str | os.PathLike, ds: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gltd.save(out / "images.gltd", ds.images)
    (out / "labels.txt").write_text("".join(f"{int(y)}\n" for y in ds.labels))


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Load ``images.gltd`` + ``labels.txt``, or a directory of ``.ppm`` files
    listed in ``labels.txt`` as ``<file> <label>`` lines."""
    path = Path(path)
    labels_file = path / "labels.txt"
    if not path.is_dir() or not labels_file.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    if (path / "images.gltd").exists():
        images = gltd.load(path / "images.gltd")
        labels = np.array([int(line) for line in labels_file.read_text().split()], dtype=np.int64)
    else:
        rows = [line.split() for line in labels_file.read_text().splitlines() if line.strip()]
        images = np.stack([read_ppm(path / name) for name, _ in rows])
        labels = np.array([int(lab) for _, lab in rows], dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError(f"{path}: {len(images)} images but {len(labels)} labels")
    return Dataset(images, labels)


# ---------------------------------------------------------------------------
# synthetic textures


def _pattern(family: str, xx: np.ndarray, yy: np.ndarray, period: float,
             rng: np.random.Generator) -> np.ndarray:
    k = 2 * np.pi / period
    phase = rng.uniform(0, 2 * np.pi)
    if family == "hstripes":
        return np.sin(k * yy + phase)
    if family == "vstripes":
        return np.sin(k * xx + phase)
    if family == "diag":
        return np.sin(k * (xx + yy) / np.sqrt(2) + phase)
    if family == "antidiag":
        return np.sin(k * (xx - yy) / np.sqrt(2) + phase)
    if family == "checker":
        return np.sin(k * xx + phase) * np.sin(k * yy + rng.uniform(0, 2 * np.pi)) * 2
    if family == "rings":
        cx, cy = rng.uniform(0, xx.shape[1], size=2)
        return np.sin(k * np.hypot(xx - cx, yy - cy) + phase)
    if family == "dots":
        u = np.cos(k * xx + phase) + np.cos(k * yy + rng.uniform(0, 2 * np.pi))
        return u - 1.0
    if family == "spokes":
        cx, cy = rng.uniform(0.3, 0.7, size=2) * xx.shape[1]
        n = max(3, int(round(xx.shape[1] / period)))
        return np.sin(n * np.arctan2(yy - cy, xx - cx) + phase)
    if family == "plaid":
        return np.maximum(np.sin(k * xx + phase), np.sin(k * yy + rng.uniform(0, 2 * np.pi)))
    if family == "blobs":
        noise = rng.normal(size=xx.shape)
        field = gaussian_filter(noise, sigma=period / 4, mode="wrap")
        return field / (field.std() + 1e-12)
    raise ValueError(f"unknown texture family {family!r}")


def synth_image(label: int, size: int, rng: np.random.Generator, tint: float = 0.08) -> np.ndarray:
    """One texture image of family ``label``; colours, scale and phase are nuisances."""
    family = FAMILIES[label % len(FAMILIES)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    period = rng.uniform(0.09, 0.17) * size
    sharp = rng.uniform(2.0, 6.0)
    t = 0.5 + 0.5 * np.tanh(sharp * _pattern(family, xx, yy, period, rng))
    # near-neutral colours: luminance carries the pattern, a faint tint is
    # the only per-image colour cue
    lo, hi = rng.uniform(0.05, 0.4), rng.uniform(0.6, 0.95)
    fg = hi + rng.uniform(-tint, tint, size=3)
    bg = lo + rng.uniform(-tint, tint, size=3)
    if rng.uniform() < 0.5:
        fg, bg = bg, fg
    img = t[..., None] * fg + (1 - t[..., None]) * bg
    # slow illumination ramp and sensor noise
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    img = img + (gx * (xx / size - 0.5) + gy * (yy / size - 0.5))[..., None]
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(n_images: int, n_classes: int, seed: int, size: int = 96,
                  tint: float = 0.08) -> Dataset:
    """Class-balanced synthetic set; image ``i`` has label ``i mod n_classes``."""
    if not 2 <= n_classes <= len(FAMILIES):
        raise ValueError(f"n_classes must lie in [2, {len(FAMILIES)}]")
    if n_images < n_classes:
        raise ValueError("need at least one image per class")
    labels = np.arange(n_images) % n_classes
    rngs = [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n_images)]
    images = np.stack([synth_image(int(y), size, r, tint) for y, r in zip(labels, rngs)])
    return Dataset(images, labels.astype(np.int64))
