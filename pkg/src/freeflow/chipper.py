"""Travel-direction-up chip extraction from georeferenced overhead rasters.

All geometry lives in one local planar frame measured in meters, x to the
east and y to the north. Raster rows grow southward from ``origin``, which is
the top-left corner of pixel (0, 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import DomainError

TWO_PI = 2.0 * math.pi


class CoverageError(DomainError):
    """Raised when too much of a requested chip falls outside the raster."""


@dataclass
class GeoRaster:
    pixels: np.ndarray
    origin: tuple[float, float]
    pixel_size_m: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DomainError(f"raster must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DomainError("raster must have at least one pixel")
        if self.pixels.dtype != np.uint8:
            raise DomainError("raster pixels must be 8-bit")
        if not self.pixel_size_m > 0:
            raise DomainError("pixel_size_m must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def extent_m(self) -> tuple[float, float]:
        h, w = self.pixels.shape[:2]
        return (w * self.pixel_size_m, h * self.pixel_size_m)

    def center(self) -> tuple[float, float]:
        ex, ey = self.extent_m
        return (self.origin[0] + ex / 2, self.origin[1] - ey / 2)


@dataclass(frozen=True)
class ChipSpec:
    center: tuple[float, float]
    heading_rad: float = 0.0
    extent_m: float = 400.0
    out_px: int = 224

    def __post_init__(self):
        if not self.extent_m > 0:
            raise DomainError("extent_m must be positive")
        if self.out_px < 1:
            raise DomainError("out_px must be at least 1")
        if not 0.0 <= self.heading_rad < TWO_PI:
            raise DomainError(f"heading must lie in [0, 2*pi), got {self.heading_rad}")


def heading_from_geometry(geometry: Sequence[Sequence[float]]) -> float:
    """Clockwise-from-north angle of the first edge of a polyline."""
    (x0, y0), (x1, y1) = geometry[0], geometry[1]
    dx, dy = x1 - x0, y1 - y0
    if dx == 0 and dy == 0:
        raise DomainError("first two geometry points coincide")
    h = math.atan2(dx, dy) % TWO_PI
    # -0.0 % 2pi and tiny negatives can land exactly on 2pi
    return 0.0 if h >= TWO_PI else h


def chip_sample_points(spec: ChipSpec) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of every chip pixel center, as two out_px x out_px grids."""
    n = spec.out_px
    step = spec.extent_m / n
    offs = (np.arange(n) + 0.5) * step - spec.extent_m / 2
    right = offs[None, :]            # along chip columns
    up = -offs[:, None]              # chip rows grow downward
    s, c = math.sin(spec.heading_rad), math.cos(spec.heading_rad)
    # up axis is (sin h, cos h); right axis is (cos h, -sin h)
    x = spec.center[0] + right * c + up * s
    y = spec.center[1] - right * s + up * c
    return x, y


def bilinear_sample(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample an HxWxC array at fractional pixel-center coordinates.

    Neighbors that fall outside the array contribute black.
    """
    h, w = pixels.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    src = pixels.astype(np.float64)
    out = np.zeros(rows.shape + (pixels.shape[2],), dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros_like(out)
            vals[ok] = src[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def extract_chip(raster: GeoRaster, spec: ChipSpec, max_outside: float = 0.5) -> np.ndarray:
    """Resample a rotated square window of ``raster`` into an out_px chip.

    The window is centered on ``spec.center`` and rotated so the heading
    points to the top of the chip. Raises CoverageError when more than
    ``max_outside`` of the sample points fall outside the raster.
    """
    x, y = chip_sample_points(spec)
    ps = raster.pixel_size_m
    cols = (x - raster.origin[0]) / ps - 0.5
    rows = (raster.origin[1] - y) / ps - 0.5
    h, w = raster.pixels.shape[:2]
    inside = (rows >= -0.5) & (rows <= h - 0.5) & (cols >= -0.5) & (cols <= w - 0.5)
    outside = 1.0 - inside.mean()
    if outside > max_outside:
        raise CoverageError(f"{outside:.0%} of the chip lies outside the raster")
    out = bilinear_sample(raster.pixels, rows, cols)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_unit_image(chip: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.asarray(chip, dtype=dtype) / dtype(255.0)


def fill_polygon(canvas: np.ndarray, vertices: Sequence[Sequence[float]], color,
                 supersample: int = 1) -> np.ndarray:
    """Paint a polygon given in (col, row) pixel coordinates onto ``canvas``.

    Coverage is estimated on a ``supersample`` x ``supersample`` grid per
    pixel and blended with the existing content. Modifies ``canvas`` in place.
    """
    h, w = canvas.shape[:2]
    verts = np.asarray(vertices, dtype=np.float64)
    k = supersample
    sub = (np.arange(k) + 0.5) / k
    cy = (np.arange(h)[:, None] + sub[None, :]).ravel()
    cx = (np.arange(w)[:, None] + sub[None, :]).ravel()
    px, py = np.meshgrid(cx, cy)
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    cover = inside.reshape(h, k, w, k).mean(axis=(1, 3))[..., None]
    color = np.asarray(color, dtype=np.float64)
    blended = canvas.astype(np.float64) * (1.0 - cover) + color * cover
    canvas[...] = np.clip(np.rint(blended), 0, 255).astype(canvas.dtype)
    return canvas


def arrow_polygon(center: tuple[float, float], heading_rad: float, length: float,
                  shaft_width: float, head_width: float) -> np.ndarray:
    """Vertices (world x, y) of an arrow centered on ``center`` pointing along the heading."""
    head_len = length * 0.4
    half = length / 2
    local = np.array([
        (-shaft_width / 2, -half),
        (shaft_width / 2, -half),
        (shaft_width / 2, half - head_len),
        (head_width / 2, half - head_len),
        (0.0, half),
        (-head_width / 2, half - head_len),
        (-shaft_width / 2, half - head_len),
    ])
    s, c = math.sin(heading_rad), math.cos(heading_rad)
    x = center[0] + local[:, 0] * c + local[:, 1] * s
    y = center[1] - local[:, 0] * s + local[:, 1] * c
    return np.stack([x, y], axis=1)


def world_to_pixel(raster_origin: tuple[float, float], pixel_size_m: float,
                   points: np.ndarray) -> np.ndarray:
    """Map world (x, y) points to fractional (col, row) edge coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    col = (pts[:, 0] - raster_origin[0]) / pixel_size_m
    row = (raster_origin[1] - pts[:, 1]) / pixel_size_m
    return np.stack([col, row], axis=1)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_png(path: str | Path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")
    return path


def save_raster(raster: GeoRaster, png_path: str | Path) -> Path:
    """Write the raster as a PNG plus a ``.json`` sidecar holding georeferencing."""
    png_path = write_png(png_path, raster.pixels)
    sidecar = png_path.with_suffix(".json")
    sidecar.write_text(json.dumps({"origin": list(raster.origin),
                                   "pixel_size_m": raster.pixel_size_m}) + "\n",
                       encoding="utf-8")
    return png_path


def load_raster(png_path: str | Path) -> GeoRaster:
    png_path = Path(png_path)
    meta = json.loads(png_path.with_suffix(".json").read_text(encoding="utf-8"))
    return GeoRaster(read_png(png_path), tuple(meta["origin"]), float(meta["pixel_size_m"]))


def chip_for_segment(raster: GeoRaster, geometry, extent_m: float = 400.0,
                     out_px: int = 224) -> np.ndarray:
    """Chip centered at the first vertex of ``geometry``, travel direction up."""
    spec = ChipSpec(tuple(geometry[0]), heading_from_geometry(geometry), extent_m, out_px)
    return extract_chip(raster, spec)
