"""Synthetic desk-scale image datasets and PNG dataset ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

logger = logging.getLogger(__name__)

SYNTH_KINDS = ("gradient-fields", "gaussian-blobs", "stripe-textures")


@dataclass
class SyntheticDatasetSpec:
    """Recipe for a deterministic synthetic dataset.

    ``generator`` is one of the three texture families, or "mixed" to cycle
    through them image by image.
    """

    count: int
    size: int
    generator: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if self.generator not in SYNTH_KINDS + ("mixed",):
            raise ConfigError(f"unknown synthetic generator {self.generator!r}")
        if self.count < 1 or self.size < 4:
            raise ConfigError("synthetic dataset needs count >= 1 and size >= 4")


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.linspace(0.0, 1.0, size)
    return np.meshgrid(u, u, indexing="ij")


def _gradient_field(size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = _coords(size)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b = rng.uniform(-1.0, 1.0, 2)
        base = rng.uniform(0.15, 0.85)
        wobble = rng.uniform(0.0, 0.15) * np.sin(
            2 * np.pi * (rng.uniform(0.5, 2.0) * u + rng.uniform(0.5, 2.0) * v)
        )
        img[c] = base + 0.5 * (a * (u - 0.5) + b * (v - 0.5)) + wobble
    return img


def _gaussian_blobs(size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = _coords(size)
    img = np.tile(rng.uniform(0.1, 0.9, size=(3, 1, 1)), (1, size, size))
    for _ in range(int(rng.integers(3, 7))):
        cu, cv = rng.uniform(0.1, 0.9, 2)
        sigma = rng.uniform(0.05, 0.25)
        blob = np.exp(-(((u - cu) ** 2 + (v - cv) ** 2) / (2 * sigma**2)))
        color = rng.uniform(-0.6, 0.6, size=(3, 1, 1))
        img += color * blob
    return img


def _stripe_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = _coords(size)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(2.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
    sharp = rng.uniform(1.0, 4.0)
    wave = np.tanh(sharp * wave) / np.tanh(sharp)
    color_a = rng.uniform(0.1, 0.9, size=(3, 1, 1))
    color_b = rng.uniform(0.1, 0.9, size=(3, 1, 1))
    return color_a + (color_b - color_a) * (0.5 + 0.5 * wave)


_GENERATORS = {
    "gradient-fields": _gradient_field,
    "gaussian-blobs": _gaussian_blobs,
    "stripe-textures": _stripe_texture,
}


def synth_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic image, (3, size, size) float32 in [0, 1].

    Each image is remapped onto a random intensity band, so brightness and
    contrast vary strongly across the dataset; per-image feature statistics
    then carry real information, which is what separates adaptive from
    fixed normalization.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown synthetic generator {kind!r}")
    img = np.clip(_GENERATORS[kind](size, rng), 0.0, 1.0)
    lo, span = img.min(), img.max() - img.min()
    if span > 1e-6:
        img = (img - lo) / span
    band_lo = rng.uniform(0.0, 0.55)
    band_hi = band_lo + rng.uniform(0.25, 1.0 - band_lo)
    return (band_lo + (band_hi - band_lo) * img).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, out_dir) -> list:
    """Write the dataset as PNG files and return their paths (sorted)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = SYNTH_KINDS if spec.generator == "mixed" else (spec.generator,)
    digits = max(5, len(str(spec.count - 1)))
    paths = []
    for i in range(spec.count):
        kind = kinds[i % len(kinds)]
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 11, i)))
        img = synth_image(kind, spec.size, rng)
        path = out / f"img_{i:0{digits}d}.png"
        save_image01(img, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# PNG image I/O.


def save_image01(chw: np.ndarray, path) -> None:
    """Write a (3, H, W) or (H, W) float [0, 1] array as an 8-bit PNG."""
    arr = np.clip(np.asarray(chw, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        mode = "RGB"
    else:
        mode = "L"
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode=mode).save(path, format="PNG")


def load_image01(path, size: int | None = None) -> np.ndarray:
    """Decode a PNG to a (3, H, W) float32 array in [0, 1].

    Grayscale inputs are replicated to three channels.  With ``size`` set,
    the image is center-cropped square then bilinearly resized.
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None:
            w, h = img.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            img = img.crop((left, top, left + side, top + side))
            if side != size:
                img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


@dataclass
class DatasetItem:
    path: Path
    image: np.ndarray  # (3, size, size) float32 in [0, 1]


def ingest_dataset(directory, size: int) -> list:
    """Decode every readable image in ``directory``, sorted by path.

    Non-image files are skipped with a warning; the skip count is logged.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    items = []
    skipped = 0
    for path in sorted(p for p in root.iterdir() if p.is_file()):
        try:
            items.append(DatasetItem(path=path, image=load_image01(path, size=size)))
        except (UnidentifiedImageError, OSError):
            skipped += 1
            logger.warning("skipping non-image file %s", path)
    if skipped:
        logger.warning("ingest: skipped %d non-image files in %s", skipped, root)
    if not items:
        raise FileNotFoundError(f"no decodable images in {root}")
    return items
