"""Background cropping, annotation remapping, and grid tiling with labels.

Each source image goes through: Canny-based crop of the dark background,
shift of the defect boxes to the cropped origin, then an exact m x n grid
partition where every cell becomes a labeled tile (1 if any defect box
overlaps it with positive area, else 0).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import (
    AnnotatedImage,
    DatasetManifest,
    DefectBox,
    GridSpec,
    TileEntry,
    TileRecord,
    ValidationError,
    save_gray_png,
    tile_filename,
)

logger = logging.getLogger(__name__)

# Textbook Canny defaults for 8-bit intensities; all exposed as config.
CANNY_LOW = 50
CANNY_HIGH = 150
CANNY_SIGMA = 1.4


@dataclass(frozen=True)
class CropBox:
    """Half-open crop rectangle in original-image coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ValidationError(f"empty crop box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


def compute_crop_box(image: AnnotatedImage, low: float = CANNY_LOW,
                     high: float = CANNY_HIGH,
                     sigma: float = CANNY_SIGMA) -> CropBox:
    """Bounding rectangle of all Canny edge pixels.

    The image is Gaussian-smoothed, then edges are found with double-threshold
    hysteresis; the returned box tightly encloses every edge pixel. An image
    with no edges at all (e.g. uniform intensity) falls back to the full
    image box.
    """
    if low >= high:
        raise ValidationError(f"canny thresholds must satisfy low < high, "
                              f"got {low} >= {high}")
    smoothed = cv2.GaussianBlur(image.pixels, (0, 0), sigma) if sigma > 0 \
        else image.pixels
    edges = cv2.Canny(smoothed, low, high)
    ys, xs = np.nonzero(edges)
    if len(xs) == 0:
        return CropBox(0, 0, image.width, image.height)
    return CropBox(int(xs.min()), int(ys.min()),
                   int(xs.max()) + 1, int(ys.max()) + 1)


def crop_and_remap(image: AnnotatedImage,
                   box: CropBox) -> tuple[AnnotatedImage, int]:
    """Crop to ``box`` and shift defect boxes to the new origin.

    Boxes partially outside the crop are clipped to the visible fragment;
    boxes with no intersection are dropped. Returns the cropped image and
    the number of dropped boxes.
    """
    if box.x0 < 0 or box.y0 < 0 or box.x1 > image.width or box.y1 > image.height:
        raise ValidationError(f"crop box {box} outside image "
                              f"{image.width}x{image.height}")
    pixels = np.ascontiguousarray(image.pixels[box.y0:box.y1, box.x0:box.x1])
    remapped: list[DefectBox] = []
    dropped = 0
    for d in image.defects:
        # Clip in image coordinates first: shifting ahead of the clip could
        # build a box with negative corners, which DefectBox rejects.
        visible = d.clip_to(box.x0, box.y0, box.x1, box.y1)
        if visible is None:
            dropped += 1
        else:
            remapped.append(visible.shift(-box.x0, -box.y0))
    if dropped:
        logger.warning("image '%s': %d defect box(es) fell outside the crop "
                       "and were dropped", image.image_id, dropped)
    cropped = AnnotatedImage(image_id=image.image_id, width=box.width,
                             height=box.height, pixels=pixels,
                             defects=tuple(remapped))
    return cropped, dropped


def tile_rect(image_w: int, image_h: int, grid: GridSpec,
              col: int, row: int) -> tuple[int, int, int, int]:
    """Pixel rectangle of grid cell (col, row); cells partition the image.

    Remainder pixels of non-divisible dimensions land in the last
    column/row via the floor arithmetic.
    """
    if not (0 <= col < grid.m and 0 <= row < grid.n):
        raise ValidationError(f"cell ({col},{row}) outside grid "
                              f"{grid.m}x{grid.n}")
    x0 = col * image_w // grid.m
    x1 = (col + 1) * image_w // grid.m
    y0 = row * image_h // grid.n
    y1 = (row + 1) * image_h // grid.n
    return (x0, y0, x1, y1)


def tile_overlaps_defect(tile: tuple[int, int, int, int],
                         defect: DefectBox) -> bool:
    """True iff the half-open rectangles intersect with positive area."""
    x0, y0, x1, y1 = tile
    return (max(x0, defect.x_min) < min(x1, defect.x_max)
            and max(y0, defect.y_min) < min(y1, defect.y_max))


def tile_and_label(image: AnnotatedImage, grid: GridSpec) -> list[TileRecord]:
    """Split an already-cropped image into m*n labeled tiles.

    Order is rows within columns: (0,0), (0,1), ..., (0,n-1), (1,0), ...
    """
    tiles: list[TileRecord] = []
    for col in range(grid.m):
        for row in range(grid.n):
            rect = tile_rect(image.width, image.height, grid, col, row)
            x0, y0, x1, y1 = rect
            label = int(any(tile_overlaps_defect(rect, d)
                            for d in image.defects))
            tiles.append(TileRecord(
                image_id=image.image_id, col=col, row=row, rect=rect,
                label=label,
                pixels=np.ascontiguousarray(image.pixels[y0:y1, x0:x1]),
            ))
    return tiles


def _process_one(image: AnnotatedImage, grid: GridSpec, out_dir: Path,
                 low: float, high: float,
                 sigma: float) -> tuple[list[TileEntry], int]:
    box = compute_crop_box(image, low=low, high=high, sigma=sigma)
    cropped, dropped = crop_and_remap(image, box)
    entries = []
    for tile in tile_and_label(cropped, grid):
        name = tile_filename(tile.label, tile.image_id, tile.col, tile.row)
        save_gray_png(out_dir / name, tile.pixels)
        entries.append(TileEntry(path=name, label=tile.label,
                                 image_id=tile.image_id,
                                 col=tile.col, row=tile.row))
    return entries, dropped


def preprocess_dataset(source: list[AnnotatedImage], grid: GridSpec,
                       out_dir: str | Path, low: float = CANNY_LOW,
                       high: float = CANNY_HIGH, sigma: float = CANNY_SIGMA,
                       source_path: str | None = None,
                       workers: int = 1) -> DatasetManifest:
    """Crop, tile, and persist every source image; returns the tile manifest.

    Output size is exactly ``len(source) * grid.m * grid.n`` tiles. Manifest
    order follows source order regardless of worker scheduling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not source:
        logger.warning("preprocess: empty source dataset, writing empty manifest")

    seen: set[str] = set()
    for img in source:
        if img.image_id in seen:
            raise ValidationError(f"duplicate image id '{img.image_id}' "
                                  "would collide in tile filenames")
        seen.add(img.image_id)

    def work(img: AnnotatedImage) -> tuple[list[TileEntry], int]:
        return _process_one(img, grid, out_dir, low, high, sigma)

    if workers > 1 and len(source) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, source))
    else:
        results = [work(img) for img in source]

    entries: list[TileEntry] = []
    total_dropped = 0
    for per_image, dropped in results:
        entries.extend(per_image)
        total_dropped += dropped

    counts = {0: sum(1 for e in entries if e.label == 0),
              1: sum(1 for e in entries if e.label == 1)}
    manifest = DatasetManifest(
        entries=tuple(entries), counts=counts, grid=grid, source=source_path,
        params={"canny": {"low": low, "high": high, "sigma": sigma},
                "source_images": len(source),
                "dropped_defects": total_dropped},
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
