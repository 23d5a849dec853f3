"""Tissue detection and deterministic, resolution-aware tile grids.

A slide enters as a plain raster plus a microns-per-pixel sidecar. Tiling
standardizes the physical field of view (128 um by default), so the tile
edge in pixels is ``round(fov_um / mpp)``, half away from zero. Tissue is
found on a low-resolution thumbnail: grayscale, Gaussian smoothing, Otsu
threshold (darker class = tissue), suppression of low-variance regions,
and exclusion of pen/marker colors. Tiles are laid on a regular grid from
(0,0) with a configurable gap between adjacent tiles and kept when their
area-weighted tissue fraction clears the inclusion threshold.

Everything here is a pure function of (raster bytes, config): repeated runs
produce byte-identical manifests and overlays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    DegenerateHistogramError,
    InvalidRecordError,
    InvalidResolutionError,
    SlideRejectedError,
    ThumbnailTooSmallError,
    UnreadableRasterError,
)
from .formats import SlideRecord, TileManifest, TileRow

BACKGROUND, TISSUE, ARTIFACT = 0, 1, 2

OVERLAY_COLOR = (0, 255, 0)


@dataclass(frozen=True)
class PenHueRule:
    """An HSV box; pixels inside it are classed as marker artifact."""

    name: str
    hue_lo: float
    hue_hi: float
    sat_lo: float = 0.5
    sat_hi: float = 1.0
    val_lo: float = 0.0
    val_hi: float = 1.0


DEFAULT_PEN_RULES = (
    PenHueRule("blue_marker", hue_lo=0.50, hue_hi=0.78, sat_lo=0.5),
    PenHueRule("green_marker", hue_lo=0.22, hue_hi=0.50, sat_lo=0.5),
    PenHueRule("black_marker", hue_lo=0.0, hue_hi=1.0, sat_lo=0.0, val_hi=0.12),
)


@dataclass
class TilingConfig:
    field_of_view_um: float = 128.0
    stride_gap_px: int = 1
    min_fraction_tissue: float = 0.5
    gaussian_sigma_px: float = 2.0
    min_tissue_area_mm2: float = 25.0
    pen_hue_rules: tuple[PenHueRule, ...] = DEFAULT_PEN_RULES
    low_variance_window_px: int = 8
    low_variance_std: float = 4.0 / 255.0
    thumbnail_max_side: int = 2048

    def __post_init__(self):
        if self.field_of_view_um <= 0:
            raise InvalidRecordError("field_of_view_um must be positive")
        if not (0.0 <= self.min_fraction_tissue <= 1.0):
            raise InvalidRecordError("min_fraction_tissue must lie in [0,1]")


@dataclass
class TissueMask:
    """Per-thumbnail-pixel class grid: background / tissue / artifact."""

    classes: np.ndarray  # uint8, shape = ceil(slide dims / downscale)
    downscale: int

    @property
    def tissue(self) -> np.ndarray:
        return self.classes == TISSUE

    def tissue_area_mm2(self, mpp: float) -> float:
        pixel_mm = mpp * self.downscale / 1000.0
        return float(self.tissue.sum()) * pixel_mm * pixel_mm


def tile_px_for(mpp: float, fov_um: float = 128.0) -> int:
    """Tile edge in native pixels for a physical field of view.

    Rounds half away from zero, so 128/0.5 -> 256 and 128/0.25 -> 512.
    """
    if mpp <= 0:
        raise InvalidResolutionError(f"mpp must be positive, got {mpp}")
    return int(math.floor(fov_um / mpp + 0.5))


def otsu_threshold(histogram) -> int:
    """Threshold maximizing between-class variance; ties go to the lower bin.

    Pixels with intensity <= threshold form the lower class. Requires at
    least two occupied bins.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.shape != (256,):
        raise ValueError(f"histogram must have 256 bins, got {counts.shape}")
    if (counts < 0).any():
        raise ValueError("histogram counts must be nonnegative")
    if int((counts > 0).sum()) < 2:
        raise DegenerateHistogramError("histogram has fewer than two occupied bins")

    total = counts.sum()
    p = counts / total
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(p)
    mu0_sum = np.cumsum(p * levels)
    mu_total = mu0_sum[-1]
    w1 = 1.0 - w0
    # sigma_b^2(t) = (mu_T * w0 - mu0_sum)^2 / (w0 * w1); zero where a class is empty
    valid = (w0 > 0) & (w1 > 0)
    sigma_b2 = np.zeros(256)
    num = (mu_total * w0 - mu0_sum) ** 2
    sigma_b2[valid] = num[valid] / (w0[valid] * w1[valid])
    return int(np.argmax(sigma_b2))


def load_raster(slide: SlideRecord) -> np.ndarray:
    """Decode the slide raster as an RGB uint8 array."""
    try:
        with Image.open(slide.source_path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UnreadableRasterError(f"{slide.source_path}: {exc}") from None
    if rgb.shape[:2] != (slide.height_px, slide.width_px):
        raise InvalidRecordError(
            f"{slide.slide_id}: raster is {rgb.shape[1]}x{rgb.shape[0]} px "
            f"but record says {slide.width_px}x{slide.height_px}"
        )
    return rgb


def choose_downscale(width_px: int, height_px: int, max_side: int = 2048) -> int:
    """Power-of-two thumbnail downscale; the largest thumbnail within max_side.

    Minimum 2, so the thumbnail is always a strict reduction of the raster.
    """
    ds = 2
    while math.ceil(max(width_px, height_px) / ds) > max_side:
        ds *= 2
    return ds


def block_average(arr: np.ndarray, ds: int) -> np.ndarray:
    """Area-average downsample by an integer factor, edge-padding to fit."""
    h, w = arr.shape[:2]
    pad_h = (-h) % ds
    pad_w = (-w) % ds
    if pad_h or pad_w:
        pad = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (arr.ndim - 2)
        arr = np.pad(arr, pad, mode="edge")
    new_h, new_w = arr.shape[0] // ds, arr.shape[1] // ds
    shaped = arr.reshape((new_h, ds, new_w, ds) + arr.shape[2:])
    return shaped.mean(axis=(1, 3))


def thumbnail_rgb(slide: SlideRecord, max_side: int = 2048) -> tuple[np.ndarray, int]:
    """Float RGB thumbnail in [0,1] plus the downscale used."""
    rgb = load_raster(slide)
    ds = choose_downscale(slide.width_px, slide.height_px, max_side)
    return block_average(rgb.astype(np.float64) / 255.0, ds), ds


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(delta, 1e-12)
    rc = (maxc - rgb[..., 0]) / safe
    gc = (maxc - rgb[..., 1]) / safe
    bc = (maxc - rgb[..., 2]) / safe
    h = np.select(
        [maxc == rgb[..., 0], maxc == rgb[..., 1]],
        [bc - gc, 2.0 + rc - bc],
        default=4.0 + gc - rc,
    )
    h = (h / 6.0) % 1.0
    h = np.where(delta == 0, 0.0, h)
    return np.stack([h, s, v], axis=-1)


def _pen_mask(thumb_rgb: np.ndarray, rules) -> np.ndarray:
    hsv = _rgb_to_hsv(thumb_rgb)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    mask = np.zeros(h.shape, dtype=bool)
    for rule in rules:
        mask |= (
            (h >= rule.hue_lo)
            & (h <= rule.hue_hi)
            & (s >= rule.sat_lo)
            & (s <= rule.sat_hi)
            & (v >= rule.val_lo)
            & (v <= rule.val_hi)
        )
    return mask


def _block_std(gray: np.ndarray, win: int) -> np.ndarray:
    """Per-pixel std of the non-overlapping window the pixel falls in."""
    h, w = gray.shape
    pad_h = (-h) % win
    pad_w = (-w) % win
    padded = np.pad(gray, ((0, pad_h), (0, pad_w)), mode="edge")
    blocks = padded.reshape(padded.shape[0] // win, win, padded.shape[1] // win, win)
    std = blocks.std(axis=(1, 3))
    return np.repeat(np.repeat(std, win, axis=0), win, axis=1)[:h, :w]


def detect_tissue(slide: SlideRecord, cfg: TilingConfig) -> TissueMask:
    """Classify thumbnail pixels into tissue / background / artifact.

    Tissue is the darker Otsu class of the smoothed grayscale, minus
    low-variance windows (reclassified background) and pen-colored pixels
    (classed artifact). A single-valued image yields an empty mask.
    """
    thumb, ds = thumbnail_rgb(slide, cfg.thumbnail_max_side)
    if thumb.shape[0] < 16 or thumb.shape[1] < 16:
        raise ThumbnailTooSmallError(
            f"{slide.slide_id}: thumbnail {thumb.shape[1]}x{thumb.shape[0]} below 16x16"
        )
    gray = _luminance(thumb)
    smoothed = gaussian_filter(gray, sigma=cfg.gaussian_sigma_px, mode="nearest")
    quantized = np.clip(np.round(smoothed * 255.0), 0, 255).astype(np.uint8)
    hist = np.bincount(quantized.ravel(), minlength=256)

    classes = np.zeros(gray.shape, dtype=np.uint8)
    try:
        threshold = otsu_threshold(hist)
    except DegenerateHistogramError:
        return TissueMask(classes=classes, downscale=ds)

    classes[quantized <= threshold] = TISSUE
    low_var = _block_std(gray, cfg.low_variance_window_px) < cfg.low_variance_std
    classes[low_var] = BACKGROUND
    classes[_pen_mask(thumb, cfg.pen_hue_rules)] = ARTIFACT
    return TissueMask(classes=classes, downscale=ds)


def _interval_weights(a: float, b: float, lo: int, hi: int) -> np.ndarray:
    """Overlap length of [a, b) with each unit cell [i, i+1), i in [lo, hi)."""
    idx = np.arange(lo, hi, dtype=np.float64)
    return np.clip(np.minimum(idx + 1.0, b) - np.maximum(idx, a), 0.0, None)


def fraction_tissue(mask: TissueMask, x: int, y: int, tile_px: int) -> float:
    """Area-weighted tissue fraction of a native-space tile, at thumbnail scale."""
    ds = mask.downscale
    ax, bx = x / ds, (x + tile_px) / ds
    ay, by = y / ds, (y + tile_px) / ds
    x0, x1 = int(math.floor(ax)), min(int(math.ceil(bx)), mask.classes.shape[1])
    y0, y1 = int(math.floor(ay)), min(int(math.ceil(by)), mask.classes.shape[0])
    wx = _interval_weights(ax, bx, x0, x1)
    wy = _interval_weights(ay, by, y0, y1)
    tissue = (mask.classes[y0:y1, x0:x1] == TISSUE).astype(np.float64)
    covered = float(wy @ tissue @ wx)
    return covered / ((bx - ax) * (by - ay))


def tile_slide(slide: SlideRecord, mask: TissueMask, cfg: TilingConfig) -> TileManifest:
    """Emit the deterministic tile grid for one slide.

    Grid origin is (0,0) native pixels; stride is tile_px plus the configured
    gap; a tile is kept iff its tissue fraction clears the threshold. Raises
    SlideRejectedError when total tissue area falls below the cohort minimum.
    """
    expected = (
        math.ceil(slide.height_px / mask.downscale),
        math.ceil(slide.width_px / mask.downscale),
    )
    if mask.classes.shape != expected:
        raise InvalidRecordError(
            f"{slide.slide_id}: mask shape {mask.classes.shape} does not match slide ({expected})"
        )
    tile_px = tile_px_for(slide.mpp, cfg.field_of_view_um)
    stride = tile_px + cfg.stride_gap_px

    area = mask.tissue_area_mm2(slide.mpp)
    if area < cfg.min_tissue_area_mm2:
        raise SlideRejectedError(
            f"{slide.slide_id}: insufficient tissue area "
            f"({area:.3f} mm^2 < {cfg.min_tissue_area_mm2} mm^2)"
        )

    rows: list[TileRow] = []
    for y in range(0, slide.height_px - tile_px + 1, stride):
        for x in range(0, slide.width_px - tile_px + 1, stride):
            frac = fraction_tissue(mask, x, y, tile_px)
            if frac >= cfg.min_fraction_tissue:
                rows.append(TileRow(index=len(rows), x=x, y=y, fraction_tissue=frac))
    manifest = TileManifest(slide_id=slide.slide_id, mpp=slide.mpp, tile_px=tile_px, rows=rows)
    manifest.validate(width_px=slide.width_px, height_px=slide.height_px)
    return manifest


def render_overlay(slide: SlideRecord, manifest: TileManifest, out_path: Path | str) -> Path:
    """Write a thumbnail PNG with one green rectangle outline per tile."""
    thumb, ds = thumbnail_rgb(slide)
    img = np.clip(np.round(thumb * 255.0), 0, 255).astype(np.uint8)
    for row in manifest.rows:
        x0 = int(math.floor(row.x / ds))
        y0 = int(math.floor(row.y / ds))
        x1 = min(int(math.ceil((row.x + manifest.tile_px) / ds)), img.shape[1]) - 1
        y1 = min(int(math.ceil((row.y + manifest.tile_px) / ds)), img.shape[0]) - 1
        img[y0, x0 : x1 + 1] = OVERLAY_COLOR
        img[y1, x0 : x1 + 1] = OVERLAY_COLOR
        img[y0 : y1 + 1, x0] = OVERLAY_COLOR
        img[y0 : y1 + 1, x1] = OVERLAY_COLOR
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    from .formats import atomic_write

    with atomic_write(out_path, "wb") as fh:
        Image.fromarray(img).save(fh, format="PNG")
    return out_path
