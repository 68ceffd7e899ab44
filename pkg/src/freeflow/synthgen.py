"""Procedural overhead road chips with a closed-form free-flow speed.

The speed rule splits information between the two input modalities:
curvature and cross-street count are visible in the image but absent from
the metadata, while the posted-limit offset is in the metadata but never
drawn. Only a model that sees both can recover the label everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .chipper import write_png
from .core import DomainError, RoadMetadata, RoadSegment, round_speed, write_manifest

BASE_MPH = {1: 70, 2: 60, 3: 50, 4: 40, 5: 30}
AREA_PCT = {0: 100, 1: 85, 2: 70}
LIMIT_OFFSETS = (-10, -5, 0, 5, 10)
SEED_MIX = 1_000_003
COUNTY_CELL_M = 10_000.0

# Dark asphalt on pale ground: with a low-contrast road the pooled backbone
# features hardly move and the desk CNN learns little within its budget.
ROAD_RGB = (12, 12, 14)
RURAL_RGB = (200, 225, 180)
SUBURBAN_RGB = (215, 220, 205)
URBAN_RGB = (230, 228, 224)
BUILDING_RGB = (170, 170, 165)
SPECKLE_SD = {0: 5.0, 1: 4.0, 2: 3.0}


@dataclass(frozen=True)
class SynthSegmentParams:
    functional_class: int
    area_type: int
    curvature: float
    intersections: int
    limit_offset_mph: int
    render_seed: int

    def __post_init__(self):
        if self.functional_class not in BASE_MPH:
            raise DomainError(f"functional_class must be in 1..5, got {self.functional_class}")
        if self.area_type not in AREA_PCT:
            raise DomainError(f"area_type must be 0, 1 or 2, got {self.area_type}")
        if not 0.0 <= self.curvature <= 1.0:
            raise DomainError(f"curvature must be in [0, 1], got {self.curvature}")
        if not 0 <= self.intersections <= 4:
            raise DomainError(f"intersections must be in 0..4, got {self.intersections}")
        if self.limit_offset_mph not in LIMIT_OFFSETS:
            raise DomainError(f"limit_offset_mph must be one of {LIMIT_OFFSETS}")
        if self.render_seed < 0:
            raise DomainError("render_seed must be nonnegative")


@dataclass(frozen=True)
class SynthConfig:
    n_segments: int = 6500
    county_grid: int = 10
    noise_mph_sd: float = 0.0
    master_seed: int = 42
    chip_px: int = 224

    def __post_init__(self):
        if self.n_segments < 1:
            raise DomainError("n_segments must be at least 1")
        if self.county_grid < 2:
            raise DomainError("county_grid must be at least 2")
        if self.noise_mph_sd < 0:
            raise DomainError("noise_mph_sd must be nonnegative")
        if self.master_seed < 0:
            raise DomainError("master_seed must be nonnegative")
        if self.chip_px < 8:
            raise DomainError("chip_px must be at least 8")


def design_speed(functional_class: int, area_type: int) -> float:
    """Unimpeded speed implied by road class and area type, in mph."""
    return BASE_MPH[functional_class] * AREA_PCT[area_type] / 100


def posted_limit(params: SynthSegmentParams) -> int:
    hundredths = BASE_MPH[params.functional_class] * AREA_PCT[params.area_type]
    nearest5 = (hundredths + 250) // 500 * 5
    return int(min(max(nearest5 + params.limit_offset_mph, 15), 70))


def oracle_freeflow(params: SynthSegmentParams, noise_mph_sd: float = 0.0,
                    rng: np.random.Generator | None = None) -> int:
    """Ground-truth free-flow speed of a synthetic segment.

    The design speed is reduced by 20 mph per unit curvature and 4 mph per
    cross street, capped at 7 mph over the posted limit, then rounded and
    clamped to [5, 79].
    """
    cap = posted_limit(params) + 7
    speed = min(design_speed(params.functional_class, params.area_type)
                - 20.0 * params.curvature - 4.0 * params.intersections, cap)
    if noise_mph_sd > 0:
        if rng is None:
            rng = label_noise_rng(params.render_seed)
        speed += rng.normal(0.0, noise_mph_sd)
    # round_speed rejects negatives, so clamp the low side first
    return min(max(round_speed(max(speed, 0.0)), 5), 79)


def label_noise_rng(render_seed: int) -> np.random.Generator:
    return np.random.default_rng([render_seed, 1])


def road_width_px(functional_class: int, rng: np.random.Generator) -> int:
    return 4 + 2 * (5 - functional_class) + int(rng.integers(-2, 3))


def _speckle(rng, shape, base, sd):
    img = np.empty(shape + (3,), dtype=np.float64)
    img[...] = base
    img += rng.normal(0.0, sd, size=shape)[..., None] * np.array([0.8, 1.0, 0.7])
    return img


def _paint_rect(img, r0, c0, r1, c1, color):
    h, w = img.shape[:2]
    r0, r1 = max(int(r0), 0), min(int(r1), h)
    c0, c1 = max(int(c0), 0), min(int(c1), w)
    if r1 > r0 and c1 > c0:
        img[r0:r1, c0:c1] = color


def _background(area_type: int, rng: np.random.Generator, n: int) -> np.ndarray:
    scale = n / 224
    if area_type == 0:
        img = _speckle(rng, (n, n), RURAL_RGB, SPECKLE_SD[0])
        for _ in range(int(rng.integers(2, 5))):
            r, c = rng.uniform(0, n, size=2)
            size = rng.uniform(30, 80, size=2) * scale
            shade = np.array(RURAL_RGB) + rng.uniform(-15, 15, size=3)
            patch = img[int(r):int(r + size[0]), int(c):int(c + size[1])]
            patch += shade - np.array(RURAL_RGB)
        return img
    if area_type == 1:
        img = _speckle(rng, (n, n), SUBURBAN_RGB, SPECKLE_SD[1])
        for _ in range(int(rng.integers(10, 19))):
            r, c = rng.uniform(0, n, size=2)
            hh, ww = rng.uniform(8, 16, size=2) * scale
            color = np.array(BUILDING_RGB) + rng.uniform(-12, 12)
            _paint_rect(img, r, c, r + hh, c + ww, color)
        return img
    img = _speckle(rng, (n, n), URBAN_RGB, SPECKLE_SD[2])
    block = rng.uniform(18, 26) * scale
    gap = rng.uniform(5, 8) * scale
    pitch = block + gap
    off_r, off_c = rng.uniform(0, pitch, size=2)
    r = off_r - pitch
    while r < n:
        c = off_c - pitch
        while c < n:
            color = np.array(BUILDING_RGB) + rng.uniform(-14, 14)
            _paint_rect(img, r, c, r + block, c + block, color)
            c += pitch
        r += pitch
    return img


def render_segment(params: SynthSegmentParams, out_px: int = 224) -> np.ndarray:
    """Draw a travel-direction-up chip for a synthetic segment.

    The main road enters at the bottom edge, passes through the chip center
    and leaves at the top as a circular arc whose sagitta grows with
    curvature. Cross streets run across the chip at right angles to the
    direction of travel.
    """
    rng = np.random.default_rng(params.render_seed)
    n = out_px
    scale = n / 224
    img = _background(params.area_type, rng, n)

    width = road_width_px(params.functional_class, rng)
    bend = 1.0 if rng.random() < 0.5 else -1.0
    sagitta = params.curvature * 0.3 * n
    slots = np.linspace(0.12 * n, 0.88 * n, 6)
    picks = np.sort(rng.choice(len(slots), size=params.intersections, replace=False))
    street_rows = slots[picks] + rng.uniform(-0.03 * n, 0.03 * n, size=len(picks))
    street_width = 5.0 * scale

    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    cx = cy = n / 2
    if sagitta < 1e-6:
        dist = np.abs(xx - cx)
    else:
        radius = (sagitta ** 2 + (n / 2) ** 2) / (2 * sagitta)
        ccx = cx - bend * radius
        dist = np.abs(np.hypot(xx - ccx, yy - cy) - radius)
        # keep only the branch of the circle that holds the apex
        dist[bend * (xx - ccx) <= 0] = np.inf

    cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    for row in street_rows:
        cover = np.maximum(cover, np.clip(street_width / 2 + 0.5 - np.abs(yy - row), 0.0, 1.0))

    road = np.array(ROAD_RGB, dtype=np.float64) + rng.normal(0.0, 3.0, size=(n, n, 1))
    img = img * (1.0 - cover[..., None]) + road * cover[..., None]
    img += rng.normal(0.0, 3.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sample_params(rng: np.random.Generator, render_seed: int) -> SynthSegmentParams:
    return SynthSegmentParams(
        functional_class=int(rng.integers(1, 6)),
        area_type=int(rng.integers(0, 3)),
        curvature=float(rng.random()),
        intersections=int(rng.integers(0, 5)),
        limit_offset_mph=int(rng.choice(LIMIT_OFFSETS)),
        render_seed=render_seed,
    )


def sample_dataset(config: SynthConfig) -> list[tuple[RoadSegment, SynthSegmentParams]]:
    """Draw every segment's hidden parameters, location and label without rendering.

    Chip paths are filled in as ``chips/<id>.png``, relative to the dataset root.
    """
    rng = np.random.default_rng(config.master_seed)
    g = config.county_grid
    out = []
    for i in range(config.n_segments):
        params = sample_params(rng, config.master_seed * SEED_MIX + i)
        x, y = rng.uniform(0, g * COUNTY_CELL_M, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        col = min(int(x // COUNTY_CELL_M), g - 1)
        row = min(int(y // COUNTY_CELL_M), g - 1)
        seg_id = f"seg{i:06d}"
        end = (x + 100.0 * math.sin(heading), y + 100.0 * math.cos(heading))
        seg = RoadSegment(
            id=seg_id,
            geometry=[(round(x, 3), round(y, 3)), (round(end[0], 3), round(end[1], 3))],
            county=f"county_{row:02d}_{col:02d}",
            metadata=RoadMetadata(params.area_type, params.functional_class, posted_limit(params)),
            freeflow_mph=oracle_freeflow(params, config.noise_mph_sd),
            chip_path=f"chips/{seg_id}.png",
        )
        out.append((seg, params))
    return out


def generate_dataset(config: SynthConfig, out_dir: str | Path,
                     progress=None) -> list[RoadSegment]:
    """Generate chips, a manifest and a hidden-parameter sidecar under ``out_dir``.

    Writes ``manifest.jsonl`` (chip paths relative to ``out_dir``),
    ``synth_params.jsonl`` and ``chips/*.png``. Returns the segments.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "chips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc

    sampled = sample_dataset(config)
    for i, (seg, params) in enumerate(sampled):
        write_png(out_dir / seg.chip_path, render_segment(params, config.chip_px))
        if progress is not None:
            progress(i + 1, len(sampled))

    segments = [seg for seg, _ in sampled]
    write_manifest(out_dir / "manifest.jsonl", segments)
    with open(out_dir / "synth_params.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for seg, params in sampled:
            fh.write(json.dumps({"id": seg.id, **asdict(params)}) + "\n")
    return segments
