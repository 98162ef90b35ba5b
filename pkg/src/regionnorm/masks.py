"""Binary region masks: generation, resampling, and PNG I/O.

Polarity convention used everywhere in this package: 1 marks a valid
(uncorrupted) pixel, 0 marks a hole (corrupted pixel).  The coverage ratio
of a mask is the fraction of zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import GenerationError, ShapeError

#: The six coverage intervals used when sweeping hole sizes.
COVERAGE_INTERVALS = [(0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5), (0.5, 0.6)]


@dataclass
class RegionMask:
    """An H x W binary map; 1 = valid pixel, 0 = hole."""

    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.height, self.width):
            raise ShapeError(f"mask bits shape {self.bits.shape} != ({self.height}, {self.width})")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ShapeError("mask values must be exactly 0 or 1")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "RegionMask":
        bits = np.asarray(bits)
        return cls(bits.shape[0], bits.shape[1], bits)

    @property
    def coverage_ratio(self) -> float:
        """Fraction of hole pixels."""
        return float(np.count_nonzero(self.bits == 0)) / self.bits.size

    def hole_count(self) -> int:
        return int(np.count_nonzero(self.bits == 0))

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass
class MaskSpec:
    """Request for a randomly generated mask."""

    kind: str = "irregular"
    coverage_interval: tuple = (0.0, 0.6)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("regular", "irregular"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        lo, hi = self.coverage_interval
        if not (0.0 <= lo < hi <= 0.6 + 1e-12):
            raise ValueError(f"coverage interval must satisfy 0 <= lo < hi <= 0.6, got {lo}, {hi}")


def regular_square_mask(h: int, w: int) -> RegionMask:
    """Centered square hole occupying exactly a quarter of the image."""
    if h % 2 or w % 2:
        raise ShapeError(f"regular mask needs even dimensions, got {h}x{w}")
    bits = np.ones((h, w), dtype=np.uint8)
    side_h, side_w = h // 2, w // 2
    top, left = (h - side_h) // 2, (w - side_w) // 2
    bits[top : top + side_h, left : left + side_w] = 0
    return RegionMask(h, w, bits)


def _stamp_disk(hole: np.ndarray, r: float, c: float, radius: int) -> None:
    h, w = hole.shape
    r0, r1 = max(int(r) - radius, 0), min(int(r) + radius + 1, h)
    c0, c1 = max(int(c) - radius, 0), min(int(c) + radius + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.ogrid[r0:r1, c0:c1]
    hole[r0:r1, c0:c1] |= (yy - r) ** 2 + (xx - c) ** 2 <= radius**2


def _draw_stroke(hole: np.ndarray, rng: np.random.Generator, target_px: int) -> None:
    """One free-form stroke: a random walk of stamped disks."""
    h, w = hole.shape
    steps = int(rng.integers(8, 24))
    # Size the brush so a single stroke lands near the remaining deficit.
    radius = int(np.clip(np.sqrt(max(target_px, 1) / (steps * 2.5)), 1, max(h, w) // 6))
    if target_px <= 4:
        radius = 0  # degenerate: stamp single pixels
        steps = min(steps, max(target_px, 1))
    r = rng.uniform(0, h)
    c = rng.uniform(0, w)
    angle = rng.uniform(0, 2 * np.pi)
    step_len = max(radius, 1) * rng.uniform(0.8, 1.6)
    for _ in range(steps):
        _stamp_disk(hole, r, c, radius)
        angle += rng.normal(0.0, 0.7)
        r = float(np.clip(r + step_len * np.sin(angle), 0, h - 1))
        c = float(np.clip(c + step_len * np.cos(angle), 0, w - 1))


def irregular_stroke_mask(
    h: int, w: int, spec: MaskSpec, rng: np.random.Generator | None = None
) -> RegionMask:
    """Random free-form hole whose coverage lands in ``spec.coverage_interval``.

    Strokes are added until the lower bound is reached; overshooting the
    upper bound discards the attempt.  Fails after 100 attempts.
    """
    lo, hi = spec.coverage_interval
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    total = h * w
    for _ in range(100):
        hole = np.zeros((h, w), dtype=bool)
        covered = 0.0
        ok = True
        while covered < lo:
            deficit = (lo + hi) / 2.0 - covered
            _draw_stroke(hole, rng, int(deficit * total))
            covered = np.count_nonzero(hole) / total
            if covered > hi:
                ok = False
                break
        if ok and lo <= covered <= hi:
            return RegionMask(h, w, np.where(hole, 0, 1).astype(np.uint8))
    raise GenerationError(
        f"could not reach coverage in [{lo}, {hi}] on a {h}x{w} grid within 100 attempts"
    )


def downsample_mask(mask: RegionMask, factor: int) -> RegionMask:
    """Nearest-neighbor subsampling, keeping each block's top-left pixel."""
    if factor < 1:
        raise ShapeError(f"downsample factor must be >= 1, got {factor}")
    if mask.height % factor or mask.width % factor:
        raise ShapeError(f"factor {factor} does not divide mask size {mask.height}x{mask.width}")
    return RegionMask.from_bits(mask.bits[::factor, ::factor])


def resize_mask(mask: RegionMask, h: int, w: int) -> RegionMask:
    """Nearest-neighbor resize to an arbitrary target size (stays binary)."""
    if (mask.height, mask.width) == (h, w):
        return mask
    img = Image.fromarray(mask.bits * 255, mode="L").resize((w, h), Image.NEAREST)
    return RegionMask.from_bits((np.asarray(img) >= 128).astype(np.uint8))


def save_mask(mask: RegionMask, path) -> None:
    """8-bit grayscale PNG; valid pixels stored as 255, holes as 0."""
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> RegionMask:
    """Load a grayscale PNG mask; values >= 128 become 1."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return RegionMask.from_bits((arr >= 128).astype(np.uint8))


def save_grayscale(values01: np.ndarray, path) -> None:
    """Write a continuous [0, 1] map as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(path, format="PNG")
