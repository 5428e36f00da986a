"""Synthetic scene generator: determinism and pixel-exact ground truth."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from tiledetect.core import PipelineError, load_source_manifest
from tiledetect.synthgen import (
    SHAPES,
    GenerationError,
    SceneSpec,
    generate_dataset,
    generate_image,
)


def _spec(**kw) -> SceneSpec:
    base = dict(shape="rounded-rectangle", width=160, height=120,
                min_defects=1, max_defects=3, seed=42)
    base.update(kw)
    return SceneSpec(**base)


# --- spec validation --------------------------------------------------------

def test_spec_rejects_unknown_shape():
    with pytest.raises(PipelineError, match="shape"):
        _spec(shape="triangle")


def test_spec_rejects_bad_defect_range():
    with pytest.raises(PipelineError):
        _spec(min_defects=3, max_defects=1)
    with pytest.raises(PipelineError):
        _spec(min_defects=-1)


def test_spec_rejects_unknown_kind():
    with pytest.raises(PipelineError, match="kind"):
        _spec(defect_kinds=("rust",))


def test_spec_rejects_tiny_canvas():
    with pytest.raises(PipelineError):
        _spec(width=8, height=8)


# --- generate_image ---------------------------------------------------------

def test_no_defects_gives_empty_list():
    img = generate_image(_spec(min_defects=0, max_defects=0), 0)
    assert img.defects == ()


def test_same_seed_and_index_is_byte_identical():
    spec = _spec()
    a = generate_image(spec, 5)
    b = generate_image(spec, 5)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.defects == b.defects


def test_different_indices_differ():
    spec = _spec()
    a = generate_image(spec, 0)
    b = generate_image(spec, 1)
    assert not np.array_equal(a.pixels, b.pixels)


def test_defect_count_range_respected():
    spec = _spec(min_defects=2, max_defects=2)
    for index in range(6):
        assert len(generate_image(spec, index).defects) == 2


def test_defect_kinds_restricted():
    spec = _spec(defect_kinds=("dirt",), min_defects=2, max_defects=3)
    for index in range(4):
        for box in generate_image(spec, index).defects:
            assert box.kind == "dirt"


def test_boxes_are_tight_against_diff_oracle():
    """Every box is exactly the bounding box of pixels its defect changed."""
    spec = _spec(min_defects=3, max_defects=3)
    clean_spec = replace(spec, min_defects=0, max_defects=0)
    for index in range(8):
        dirty = generate_image(spec, index)
        clean = generate_image(clean_spec, index)
        changed = dirty.pixels != clean.pixels
        assert changed.any()
        assert len(dirty.defects) == 3
        # every changed pixel is covered by some reported box
        cover = np.zeros_like(changed)
        for box in dirty.defects:
            cover[box.y_min:box.y_max, box.x_min:box.x_max] = True
        assert not (changed & ~cover).any()
        # and each box is tight: changed pixels touch all four sides
        for box in dirty.defects:
            inside = changed[box.y_min:box.y_max, box.x_min:box.x_max]
            assert inside[0, :].any() and inside[-1, :].any()
            assert inside[:, 0].any() and inside[:, -1].any()


def test_defects_darken_pixels():
    spec = _spec(min_defects=1, max_defects=1)
    clean = generate_image(replace(spec, min_defects=0, max_defects=0), 3)
    dirty = generate_image(spec, 3)
    diff_at = dirty.pixels != clean.pixels
    assert (dirty.pixels[diff_at] < clean.pixels[diff_at]).all()


def test_defect_layout_shared_across_shapes():
    # shape only swaps the silhouette; the defect stream is untouched, so
    # source/target objects carry comparable defect populations
    boxes = {}
    for shape in SHAPES:
        img = generate_image(_spec(shape=shape, min_defects=2, max_defects=3), 7)
        boxes[shape] = img.defects
    assert boxes["rounded-rectangle"] == boxes["ellipse"] == boxes["polygon"]


def test_all_shapes_render_bright_object():
    for shape in SHAPES:
        img = generate_image(_spec(shape=shape, min_defects=0, max_defects=0), 1)
        assert img.pixels.max() >= 100  # object present
        corners = [img.pixels[0, 0], img.pixels[0, -1],
                   img.pixels[-1, 0], img.pixels[-1, -1]]
        assert max(corners) <= 10  # background stays dark


def test_object_too_small_for_defects():
    spec = _spec(width=16, height=16, margin_frac=0.42,
                 min_defects=1, max_defects=1)
    with pytest.raises(GenerationError, match="too small"):
        generate_image(spec, 0)


# --- generate_dataset -------------------------------------------------------

def test_dataset_round_trips_through_manifest(tmp_path):
    spec = _spec()
    manifest = generate_dataset(spec, 4, tmp_path)
    images = load_source_manifest(manifest)
    assert [im.image_id for im in images] == \
        ["img0000", "img0001", "img0002", "img0003"]
    regenerated = generate_image(spec, 2)
    assert np.array_equal(images[2].pixels, regenerated.pixels)
    assert images[2].defects == regenerated.defects


def test_dataset_two_runs_identical_bytes(tmp_path):
    spec = _spec()
    generate_dataset(spec, 3, tmp_path / "a")
    generate_dataset(spec, 3, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()
    for f in sorted((tmp_path / "a").glob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_dataset_rejects_zero_count(tmp_path):
    with pytest.raises(PipelineError):
        generate_dataset(_spec(), 0, tmp_path)
