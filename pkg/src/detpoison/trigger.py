"""Trigger synthesis, loading, and alpha blending.

Blending computes ``out = round_half_up(in * (1 - alpha) + T * alpha)`` per
channel. To make that bit-reproducible (and exactly testable against rational
arithmetic), the ratio is resolved to 1/10000 precision and the whole blend is
carried out in integer arithmetic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import coco_io
from .errors import InvalidAlphaError, OutOfBoundsError, SizeTooSmallError

ALPHA_DENOM = 10000

# Gaussian source-grid parameters: fill the dynamic range without saturating
# most pixels; clamped to [0, 255] before quantization.
GAUSS_MEAN = 127.5
GAUSS_STD = 60.0
GAUSS_GRID = 4


def _alpha_units(alpha: float) -> int:
    """Resolve a blend ratio to integer units of 1/ALPHA_DENOM."""
    if not (0.0 <= alpha <= 1.0):
        raise InvalidAlphaError(f"blend ratio {alpha} outside [0, 1]")
    return round(alpha * ALPHA_DENOM)


@dataclass(eq=False)
class Trigger:
    """A raster patch plus its blend ratio.

    ``pattern_id`` disambiguates triggers in simultaneous-mode manifests.
    """

    pattern: np.ndarray  # (h, w, 3) uint8
    alpha: float
    pattern_id: str

    def __post_init__(self):
        if (
            self.pattern.ndim != 3
            or self.pattern.shape[2] != 3
            or self.pattern.dtype != np.uint8
        ):
            raise ValueError("trigger pattern must be (h, w, 3) uint8")
        if self.pattern.shape[0] < 1 or self.pattern.shape[1] < 1:
            raise ValueError("trigger pattern must be at least 1x1")
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidAlphaError(f"blend ratio {self.alpha} outside (0, 1]")

    @property
    def width(self) -> int:
        return self.pattern.shape[1]

    @property
    def height(self) -> int:
        return self.pattern.shape[0]


def synth_gaussian_trigger(size: tuple[int, int], seed, alpha: float = 1.0,
                           pattern_id: str | None = None) -> Trigger:
    """Seeded 4x4 Gaussian noise grid, bilinearly upsampled to (w, h).

    Corner pixels of the result equal the corresponding source-grid values
    (align-corners interpolation). Deterministic given the seed.
    """
    w, h = size
    if w < GAUSS_GRID or h < GAUSS_GRID:
        raise SizeTooSmallError(
            f"gaussian trigger must be at least {GAUSS_GRID}x{GAUSS_GRID}, got {w}x{h}"
        )
    rng = np.random.default_rng(seed)
    grid = rng.normal(GAUSS_MEAN, GAUSS_STD, size=(GAUSS_GRID, GAUSS_GRID, 3))
    grid = np.floor(np.clip(grid, 0.0, 255.0) + 0.5).astype(np.uint8)
    pattern = _bilinear_upsample(grid, w, h)
    if pattern_id is None:
        pattern_id = f"gaussian:{w}x{h}"
    return Trigger(pattern=pattern, alpha=alpha, pattern_id=pattern_id)


def load_trigger(path, alpha: float, pattern_id: str | None = None) -> Trigger:
    """Load an arbitrary raster patch (watermark, emoji, ...) as a trigger."""
    pattern = coco_io.load_image(path)
    if pattern_id is None:
        pattern_id = f"file:{os.path.basename(str(path))}"
    return Trigger(pattern=pattern, alpha=alpha, pattern_id=pattern_id)


def _bilinear_upsample(grid: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Align-corners bilinear interpolation of a small uint8 grid."""
    gh, gw = grid.shape[:2]
    g = grid.astype(np.float64)
    xs = np.linspace(0.0, gw - 1.0, out_w) if out_w > 1 else np.zeros(1)
    ys = np.linspace(0.0, gh - 1.0, out_h) if out_h > 1 else np.zeros(1)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    tl = g[np.ix_(y0, x0)]
    tr = g[np.ix_(y0, x0 + 1)]
    bl = g[np.ix_(y0 + 1, x0)]
    br = g[np.ix_(y0 + 1, x0 + 1)]
    top = tl * (1.0 - fx) + tr * fx
    bot = bl * (1.0 - fx) + br * fx
    out = top * (1.0 - fy) + bot * fy
    return np.floor(out + 0.5).astype(np.uint8)


def blend_values(base: np.ndarray, overlay: np.ndarray, alpha: float) -> np.ndarray:
    """Exact round-half-up of ``base * (1 - alpha) + overlay * alpha``.

    Integer arithmetic with alpha in units of 1/10000; inputs uint8.
    """
    units = _alpha_units(alpha)
    b = base.astype(np.int64)
    t = np.asarray(overlay).astype(np.int64)
    return ((b * (ALPHA_DENOM - units) + t * units + ALPHA_DENOM // 2)
            // ALPHA_DENOM).astype(np.uint8)


def blend_patch(img: np.ndarray, trig: Trigger, top_left: tuple[int, int]) -> np.ndarray:
    """Blend a trigger into a copy of the image; pixels outside the region
    are untouched."""
    px, py = top_left
    h, w = img.shape[:2]
    if px < 0 or py < 0 or px + trig.width > w or py + trig.height > h:
        raise OutOfBoundsError(
            f"trigger {trig.width}x{trig.height} at ({px}, {py}) exceeds "
            f"{w}x{h} image bounds"
        )
    out = img.copy()
    region = out[py : py + trig.height, px : px + trig.width]
    out[py : py + trig.height, px : px + trig.width] = blend_values(
        region, trig.pattern, trig.alpha
    )
    return out
