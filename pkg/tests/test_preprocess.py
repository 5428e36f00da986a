"""Crop box, annotation remapping, and grid labeling against pixel oracles."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiledetect.core import (
    AnnotatedImage,
    DatasetManifest,
    DefectBox,
    GridSpec,
    ValidationError,
)
from tiledetect.preprocess import (
    compute_crop_box,
    crop_and_remap,
    preprocess_dataset,
    tile_and_label,
    tile_overlaps_defect,
    tile_rect,
)

from conftest import make_object_image


# --- compute_crop_box ------------------------------------------------------

def test_crop_box_uniform_image_falls_back_to_full():
    img = AnnotatedImage("flat", 60, 40, np.zeros((40, 60), np.uint8))
    box = compute_crop_box(img)
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 60, 40)


def test_crop_box_finds_bright_rectangle():
    pixels = np.zeros((400, 500), np.uint8)
    pixels[100:300, 100:400] = 255
    img = AnnotatedImage("rect", 500, 400, pixels)
    box = compute_crop_box(img)
    for got, want in ((box.x0, 100), (box.y0, 100), (box.x1, 400), (box.y1, 300)):
        assert abs(got - want) <= 2, (got, want)


def test_crop_box_excludes_black_margin():
    img = make_object_image(width=160, height=120, margin=20)
    box = compute_crop_box(img)
    assert box.x0 >= 15 and box.y0 >= 15
    assert box.x1 <= 160 - 15 and box.y1 <= 120 - 15


# --- crop_and_remap --------------------------------------------------------

def _cropped_to(img: AnnotatedImage, x0, y0, x1, y1):
    from tiledetect.preprocess import CropBox
    return crop_and_remap(img, CropBox(x0, y0, x1, y1))


def test_remap_shifts_defect():
    img = make_object_image(defects=((150, 80, 170, 95),), width=200,
                            height=160, margin=10)
    cropped, dropped = _cropped_to(img, 100, 50, 200, 160)
    assert dropped == 0
    box = cropped.defects[0]
    assert (box.x_min, box.y_min, box.x_max, box.y_max) == (50, 30, 70, 45)
    assert cropped.width == 100 and cropped.height == 110


def test_remap_full_crop_is_identity():
    img = make_object_image(defects=((30, 30, 50, 50),))
    cropped, dropped = _cropped_to(img, 0, 0, img.width, img.height)
    assert dropped == 0
    assert cropped.defects == img.defects
    assert np.array_equal(cropped.pixels, img.pixels)


def test_remap_drops_outside_defect(caplog):
    img = make_object_image(defects=((5, 30, 15, 40), (120, 60, 140, 80)),
                            margin=2)
    with caplog.at_level("WARNING"):
        cropped, dropped = _cropped_to(img, 100, 0, 200, 160)
    assert dropped == 1
    assert len(cropped.defects) == 1
    assert any("dropped" in rec.message for rec in caplog.records)


def test_remap_clips_straddling_defect():
    img = make_object_image(defects=((90, 30, 120, 40),), margin=2)
    cropped, dropped = _cropped_to(img, 100, 0, 200, 160)
    assert dropped == 0
    box = cropped.defects[0]
    assert (box.x_min, box.x_max) == (0, 20)


# --- tile_rect -------------------------------------------------------------

def test_tile_rect_uniform():
    grid = GridSpec(10, 10)
    assert tile_rect(1000, 1000, grid, 0, 0) == (0, 0, 100, 100)
    assert tile_rect(1000, 1000, grid, 9, 9) == (900, 900, 1000, 1000)


def test_tile_rect_remainder_lands_in_last_cells():
    assert tile_rect(101, 7, GridSpec(10, 7), 9, 0) == (90, 0, 101, 1)


def test_tile_rect_bounds_checked():
    with pytest.raises(ValidationError):
        tile_rect(100, 100, GridSpec(10, 10), 10, 0)
    with pytest.raises(ValidationError):
        tile_rect(100, 100, GridSpec(10, 10), 0, -1)


@given(w=st.integers(1, 257), h=st.integers(1, 97),
       m=st.integers(1, 12), n=st.integers(1, 9))
def test_tile_rects_partition_image(w, h, m, n):
    grid = GridSpec(m, n)
    cover = np.zeros((h, w), dtype=np.int32)
    for col in range(m):
        for row in range(n):
            x0, y0, x1, y1 = tile_rect(w, h, grid, col, row)
            assert 0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h
            cover[y0:y1, x0:x1] += 1
    # every pixel in exactly one tile: the grid is a partition
    assert cover.min() == 1 and cover.max() == 1


# --- tile_overlaps_defect vs. pixel oracle ----------------------------------

def test_overlap_corner_cases():
    assert tile_overlaps_defect((0, 0, 100, 100), DefectBox(90, 90, 110, 110))
    assert not tile_overlaps_defect((0, 0, 100, 100), DefectBox(100, 0, 120, 20))


def _oracle_overlap(tile, box, w, h):
    mask = np.zeros((h, w), dtype=bool)
    mask[box.y_min:box.y_max, box.x_min:box.x_max] = True
    tx0, ty0, tx1, ty1 = tile
    return bool(mask[ty0:ty1, tx0:tx1].any())


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_overlap_matches_pixel_oracle(data):
    w = data.draw(st.integers(4, 64), label="w")
    h = data.draw(st.integers(4, 64), label="h")
    m = data.draw(st.integers(1, 6), label="m")
    n = data.draw(st.integers(1, 6), label="n")
    x0 = data.draw(st.integers(0, w - 1), label="x0")
    y0 = data.draw(st.integers(0, h - 1), label="y0")
    x1 = data.draw(st.integers(x0 + 1, w), label="x1")
    y1 = data.draw(st.integers(y0 + 1, h), label="y1")
    box = DefectBox(x0, y0, x1, y1)
    grid = GridSpec(m, n)
    for col in range(m):
        for row in range(n):
            tile = tile_rect(w, h, grid, col, row)
            assert tile_overlaps_defect(tile, box) == \
                _oracle_overlap(tile, box, w, h)


# --- tile_and_label --------------------------------------------------------

def test_labels_no_defects():
    img = make_object_image(defects=())
    tiles = tile_and_label(img, GridSpec(10, 10))
    assert len(tiles) == 100
    assert all(t.label == 0 for t in tiles)


def test_labels_full_coverage():
    pixels = np.full((50, 50), 99, np.uint8)
    img = AnnotatedImage("full", 50, 50, pixels,
                         defects=(DefectBox(0, 0, 50, 50),))
    tiles = tile_and_label(img, GridSpec(10, 10))
    assert len(tiles) == 100
    assert all(t.label == 1 for t in tiles)


def test_labels_single_corner_defect():
    pixels = np.zeros((1000, 1000), np.uint8)
    img = AnnotatedImage("big", 1000, 1000, pixels,
                         defects=(DefectBox(90, 90, 110, 110),))
    tiles = tile_and_label(img, GridSpec(10, 10))
    flagged = {(t.col, t.row) for t in tiles if t.label == 1}
    assert flagged == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_tile_order_is_column_major():
    img = make_object_image(width=40, height=30)
    tiles = tile_and_label(img, GridSpec(3, 2))
    assert [(t.col, t.row) for t in tiles] == \
        [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]


def test_tile_pixels_match_rect():
    img = make_object_image(width=64, height=48)
    for tile in tile_and_label(img, GridSpec(4, 3)):
        x0, y0, x1, y1 = tile.rect
        assert np.array_equal(tile.pixels, img.pixels[y0:y1, x0:x1])


# --- preprocess_dataset ----------------------------------------------------

def _images(n):
    return [make_object_image(image_id=f"part{chr(97 + i)}", width=120,
                              height=90, margin=12,
                              defects=((40 + i, 40, 60 + i, 55),))
            for i in range(n)]


def test_preprocess_count_law(tmp_path):
    manifest = preprocess_dataset(_images(3), GridSpec(4, 5), tmp_path)
    assert len(manifest) == 3 * 4 * 5
    assert manifest.counts[0] + manifest.counts[1] == 60
    assert manifest.grid == GridSpec(4, 5)
    # every tile file exists and loads
    for entry in manifest.entries[:5]:
        assert manifest.resolve(entry).is_file()


def test_preprocess_empty_source_warns(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        manifest = preprocess_dataset([], GridSpec(10, 10), tmp_path)
    assert len(manifest) == 0
    assert (tmp_path / "manifest.json").is_file()
    assert any("empty" in rec.message for rec in caplog.records)


def test_preprocess_duplicate_ids_rejected(tmp_path):
    imgs = _images(2)
    dup = [imgs[0], imgs[0]]
    with pytest.raises(ValidationError, match="duplicate"):
        preprocess_dataset(dup, GridSpec(2, 2), tmp_path)


def test_preprocess_deterministic_bytes(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    preprocess_dataset(_images(2), GridSpec(3, 3), a)
    preprocess_dataset(_images(2), GridSpec(3, 3), b)
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for f in sorted(a.glob("*.png")):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_preprocess_workers_match_serial(tmp_path):
    serial = preprocess_dataset(_images(4), GridSpec(3, 2), tmp_path / "s",
                                workers=1)
    threaded = preprocess_dataset(_images(4), GridSpec(3, 2), tmp_path / "t",
                                  workers=4)
    assert serial.entries == threaded.entries
    assert (tmp_path / "s" / "manifest.json").read_bytes() == \
        (tmp_path / "t" / "manifest.json").read_bytes()


def test_preprocess_manifest_reloads(tmp_path):
    preprocess_dataset(_images(2), GridSpec(2, 2), tmp_path)
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert len(loaded) == 8
    assert loaded.grid == GridSpec(2, 2)
