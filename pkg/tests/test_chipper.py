import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from freeflow.chipper import (ChipSpec, CoverageError, GeoRaster, arrow_polygon, chip_for_segment,
                              extract_chip, fill_polygon, heading_from_geometry, load_raster,
                              save_raster, to_unit_image, world_to_pixel)
from freeflow.core import DomainError


@pytest.mark.parametrize("geom, expected", [
    ([(0, 0), (0, 1)], 0.0),
    ([(0, 0), (1, 0)], math.pi / 2),
    ([(0, 0), (0, -1)], math.pi),
    ([(0, 0), (-1, 0)], 3 * math.pi / 2),
    ([(5, 5), (6, 6), (9, 9)], math.pi / 4),
])
def test_heading_axis_cases(geom, expected):
    assert heading_from_geometry(geom) == pytest.approx(expected)


def test_heading_coincident_points():
    with pytest.raises(DomainError):
        heading_from_geometry([(2, 3), (2, 3)])


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_heading_range(dx, dy):
    if dx == 0 and dy == 0:
        return
    h = heading_from_geometry([(0, 0), (dx, dy)])
    assert 0 <= h < 2 * math.pi
    assert math.sin(h) == pytest.approx(dx / math.hypot(dx, dy), abs=1e-9)
    assert math.cos(h) == pytest.approx(dy / math.hypot(dx, dy), abs=1e-9)


def random_raster(rng, h, w, origin=(1000.0, 2000.0), ps=2.0):
    return GeoRaster(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8), origin, ps)


def test_identity_transform(rng):
    raster = random_raster(rng, 64, 64)
    spec = ChipSpec(raster.center(), 0.0, extent_m=raster.extent_m[0], out_px=64)
    assert np.array_equal(extract_chip(raster, spec), raster.pixels)


@pytest.mark.parametrize("heading", [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])
def test_quarter_turns_are_exact_permutations(rng, heading):
    raster = random_raster(rng, 32, 32)
    spec = ChipSpec(raster.center(), heading, extent_m=raster.extent_m[0], out_px=32)
    chip = extract_chip(raster, spec)
    # turning the travel direction clockwise turns the picture counter-clockwise
    assert np.array_equal(chip, np.rot90(raster.pixels, k=round(heading / (math.pi / 2))))


def arrow_scene(heading, size=600, ps=1.0):
    raster = GeoRaster(np.zeros((size, size, 3), dtype=np.uint8), (0.0, float(size)), ps)
    center = raster.center()
    poly = arrow_polygon(center, heading, 260, 60, 160)
    fill_polygon(raster.pixels, world_to_pixel(raster.origin, ps, poly), (255, 255, 255),
                 supersample=4)
    return raster, center


def upright_arrow(out_px=224, extent=400.0):
    canvas = np.zeros((out_px, out_px, 3), dtype=np.uint8)
    scale = out_px / extent
    poly = arrow_polygon((extent / 2, extent / 2), 0.0, 260, 60, 160)
    fill_polygon(canvas, world_to_pixel((0.0, extent), 1 / scale, poly), (255, 255, 255),
                 supersample=4)
    return canvas


@pytest.mark.parametrize("heading", [0.3, 1.2, 2.5, 4.0, 5.9])
def test_arrow_points_up(heading):
    raster, center = arrow_scene(heading)
    chip = extract_chip(raster, ChipSpec(center, heading))
    ref = upright_arrow()
    corr = np.corrcoef(chip[..., 0].ravel().astype(float), ref[..., 0].ravel().astype(float))[0, 1]
    assert corr >= 0.99


def test_chip_fully_outside():
    raster = random_raster(np.random.default_rng(0), 50, 50)
    cx, cy = raster.center()
    with pytest.raises(CoverageError):
        extract_chip(raster, ChipSpec((cx + 400.0, cy), 0.0, 400.0, 16))


def test_half_coverage_allowed_beyond_fails():
    raster = GeoRaster(np.full((100, 100, 3), 200, np.uint8), (0.0, 100.0), 1.0)
    # 40% of columns outside: allowed, with black fill on the outside part
    chip = extract_chip(raster, ChipSpec((90.0, 50.0), 0.0, 100.0, 10))
    assert chip[:, -1].max() == 0 and chip[:, 0].min() == 200
    with pytest.raises(CoverageError):
        extract_chip(raster, ChipSpec((110.0, 50.0), 0.0, 100.0, 10))


@pytest.mark.parametrize("h, w", [(7, 300), (500, 40), (224, 224)])
def test_output_shape_and_determinism(rng, h, w):
    raster = random_raster(rng, h, w, ps=3.0)
    spec = ChipSpec(raster.center(), 1.0, extent_m=300.0, out_px=24)
    try:
        a = extract_chip(raster, spec)
    except CoverageError:
        a = extract_chip(raster, spec, max_outside=1.0)
        b = extract_chip(raster, spec, max_outside=1.0)
    else:
        b = extract_chip(raster, spec)
    assert a.shape == (24, 24, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b)


def smooth(x, y):
    r = 127 + 90 * np.sin(x / 37.0) * np.cos(y / 53.0)
    g = 127 + 90 * np.cos((x + y) / 61.0)
    b = 127 + 60 * np.sin((x - 2 * y) / 79.0)
    return np.stack([r, g, b], axis=-1)


def sampled_raster(fn, size=400, ps=1.0):
    centers = (np.arange(size) + 0.5) * ps
    x = centers[None, :]
    y = size * ps - centers[:, None]
    return GeoRaster(np.clip(np.rint(fn(x, y)), 0, 255).astype(np.uint8), (0.0, size * ps), ps)


@pytest.mark.parametrize("heading", [0.4, 2.0, 3.7, 5.5])
def test_rotation_equivariance(heading):
    raster = sampled_raster(smooth)
    cx, cy = raster.center()
    s, c = math.sin(heading), math.cos(heading)

    def rotated(x, y):
        # clockwise turn by heading about the raster center
        dx, dy = x - cx, y - cy
        return smooth(cx + dx * c + dy * s, cy - dx * s + dy * c)

    spec = ChipSpec((cx, cy), heading, extent_m=200.0, out_px=112)
    direct = extract_chip(raster, spec).astype(float)
    upright = extract_chip(sampled_raster(rotated), ChipSpec((cx, cy), 0.0, 200.0, 112)).astype(float)
    assert np.mean(np.abs(direct - upright)) <= 2.0


def test_to_unit_image():
    chip = np.array([[[0, 255, 51]]], dtype=np.uint8)
    out = to_unit_image(chip)
    assert out.dtype == np.float32
    assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 1.0
    assert out[0, 0, 2] == pytest.approx(0.2)


def test_raster_roundtrip(tmp_path, rng):
    raster = random_raster(rng, 20, 30, origin=(5.5, -3.0), ps=0.6)
    path = save_raster(raster, tmp_path / "tile.png")
    back = load_raster(path)
    assert np.array_equal(back.pixels, raster.pixels)
    assert back.origin == raster.origin and back.pixel_size_m == raster.pixel_size_m


def test_chip_for_segment_uses_first_edge():
    raster, center = arrow_scene(math.pi / 2)
    geometry = [center, (center[0] + 10, center[1])]
    chip = chip_for_segment(raster, geometry)
    ref = upright_arrow()
    corr = np.corrcoef(chip[..., 0].ravel().astype(float), ref[..., 0].ravel().astype(float))[0, 1]
    assert corr >= 0.99


def test_raster_and_spec_validation():
    with pytest.raises(DomainError):
        GeoRaster(np.zeros((4, 4), np.uint8), (0, 0), 1.0)
    with pytest.raises(DomainError):
        GeoRaster(np.zeros((4, 4, 3), np.uint8), (0, 0), 0.0)
    with pytest.raises(DomainError):
        ChipSpec((0, 0), 2 * math.pi)
    with pytest.raises(DomainError):
        ChipSpec((0, 0), 0.0, extent_m=0.0)
    with pytest.raises(DomainError):
        ChipSpec((0, 0), 0.0, out_px=0)
