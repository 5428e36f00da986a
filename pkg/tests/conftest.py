"""Shared builders for small labeled datasets used across the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tiledetect.core import (
    AnnotatedImage,
    DatasetManifest,
    DefectBox,
    TileEntry,
    save_gray_png,
    tile_filename,
)


def make_object_image(image_id: str = "part", width: int = 200,
                      height: int = 160, margin: int = 20,
                      defects: tuple = (), object_value: int = 180,
                      defect_value: int = 40) -> AnnotatedImage:
    """Bright rectangular object on black background, defects darkened."""
    pixels = np.zeros((height, width), dtype=np.uint8)
    pixels[margin:height - margin, margin:width - margin] = object_value
    boxes = []
    for x0, y0, x1, y1 in defects:
        pixels[y0:y1, x0:x1] = defect_value
        boxes.append(DefectBox(x0, y0, x1, y1))
    return AnnotatedImage(image_id=image_id, width=width, height=height,
                          pixels=pixels, defects=tuple(boxes))


def write_toy_tiles(root: Path, n_clean: int, n_defective: int,
                    size: int = 16, seed: int = 0) -> DatasetManifest:
    """Tile set where label-1 tiles are dark and label-0 tiles bright."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for label, count, base in ((0, n_clean, 185), (1, n_defective, 45)):
        for i in range(count):
            pixels = np.clip(base + rng.integers(-25, 26, size=(size, size)),
                             0, 255).astype(np.uint8)
            name = tile_filename(label, f"toy{label}", i, 0)
            save_gray_png(root / name, pixels)
            entries.append(TileEntry(path=name, label=label,
                                     image_id=f"toy{label}", col=i, row=0))
    return DatasetManifest(entries=tuple(entries),
                           counts={0: n_clean, 1: n_defective}, root=root)


@pytest.fixture(scope="session")
def brightness_model(tmp_path_factory):
    """Tiny classifier trained to call dark tiles defective."""
    from tiledetect.model import ClassifierConfig, build_classifier, train

    root = tmp_path_factory.mktemp("toytrain")
    train_manifest = write_toy_tiles(root / "train", 80, 80, seed=1)
    val_manifest = write_toy_tiles(root / "val", 20, 20, seed=2)
    config = ClassifierConfig(epochs=6, batch_size=32, learning_rate=1e-3,
                              seed=7)
    model = build_classifier("tiny", config)
    return train(model, train_manifest, val_manifest)
