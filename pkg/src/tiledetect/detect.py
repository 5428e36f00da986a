"""Grid sliding-window inference and pseudo-bounding-box output.

A target image is split into the same grid used at preprocessing time
(stride equals tile size, no overlap), every tile is scored by the
classifier, and tiles whose score exceeds the threshold are flagged and
boxed on the original image.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import cv2
import numpy as np

from .core import AnnotatedImage, GridSpec, ValidationError
from .preprocess import (
    CANNY_HIGH,
    CANNY_LOW,
    CANNY_SIGMA,
    CropBox,
    compute_crop_box,
    tile_rect,
)

if TYPE_CHECKING:
    from .model import TrainedModel

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7
OVERLAY_INTENSITY = 255
OVERLAY_WIDTH = 2


@dataclass(frozen=True)
class DetectionConfig:
    grid: GridSpec = GridSpec(10, 10)
    threshold: float = DEFAULT_THRESHOLD
    apply_crop: bool = True
    canny_low: float = CANNY_LOW
    canny_high: float = CANNY_HIGH
    canny_sigma: float = CANNY_SIGMA

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValidationError(f"threshold must be in (0,1), "
                                  f"got {self.threshold}")
        if self.threshold <= 0.5:
            logger.warning("threshold %.3f is not above 0.5; defective tiles "
                           "are easily mislabeled", self.threshold)


@dataclass(frozen=True)
class FlaggedTile:
    col: int
    row: int
    rect: tuple[int, int, int, int]  # original-image pixel coordinates
    score: float


@dataclass(frozen=True)
class DetectionResult:
    image_id: str
    grid: GridSpec
    threshold: float
    crop_box: CropBox
    scores: np.ndarray                      # shape (m, n), indexed [col, row]
    flagged: tuple[FlaggedTile, ...] = field(default=())

    def __post_init__(self):
        self.scores.setflags(write=False)


def classify_score(p: float, threshold: float) -> int:
    """1 iff the probability strictly exceeds the threshold."""
    if not 0 <= p <= 1:
        raise ValidationError(f"probability {p} outside [0,1]")
    return int(p > threshold)


def flag_scores(scores: np.ndarray, crop_box: CropBox, grid: GridSpec,
                threshold: float) -> tuple[FlaggedTile, ...]:
    """Flagged tiles for a score grid, rects mapped back through the crop."""
    flagged = []
    for col in range(grid.m):
        for row in range(grid.n):
            score = float(scores[col, row])
            if classify_score(score, threshold):
                x0, y0, x1, y1 = tile_rect(crop_box.width, crop_box.height,
                                           grid, col, row)
                rect = (x0 + crop_box.x0, y0 + crop_box.y0,
                        x1 + crop_box.x0, y1 + crop_box.y0)
                flagged.append(FlaggedTile(col=col, row=row, rect=rect,
                                           score=score))
    return tuple(flagged)


def detect_defects(model: "TrainedModel", image: AnnotatedImage,
                   config: DetectionConfig | None = None) -> DetectionResult:
    """Score every grid tile of a target image and flag the defective ones.

    With ``apply_crop`` the image is first cropped by the same edge-based
    procedure used in preprocessing; flagged rectangles are always reported
    in original-image coordinates.
    """
    config = config or DetectionConfig()
    if image.width == 0 or image.height == 0:
        raise ValidationError(f"image '{image.image_id}' is empty")
    if config.apply_crop:
        crop_box = compute_crop_box(image, low=config.canny_low,
                                    high=config.canny_high,
                                    sigma=config.canny_sigma)
    else:
        crop_box = CropBox(0, 0, image.width, image.height)
    work = image.pixels[crop_box.y0:crop_box.y1, crop_box.x0:crop_box.x1]

    grid = config.grid
    tiles = []
    for col in range(grid.m):
        for row in range(grid.n):
            x0, y0, x1, y1 = tile_rect(crop_box.width, crop_box.height,
                                       grid, col, row)
            tiles.append(work[y0:y1, x0:x1])
    probs = model.predict_batch(tiles)
    scores = np.asarray(probs, dtype=np.float64).reshape(grid.m, grid.n)

    return DetectionResult(
        image_id=image.image_id, grid=grid, threshold=config.threshold,
        crop_box=crop_box, scores=scores,
        flagged=flag_scores(scores, crop_box, grid, config.threshold),
    )


def render_overlay(pixels: np.ndarray, result: DetectionResult) -> np.ndarray:
    """Copy of the image with a 2-px box on each flagged tile.

    The score is printed next to a box when the tile is wide enough for the
    text. The input array is left untouched; with nothing flagged the output
    is pixel-identical to the input.
    """
    out = np.asarray(pixels, dtype=np.uint8).copy()
    for tile in result.flagged:
        x0, y0, x1, y1 = tile.rect
        # nested 1-px outlines: a single thickness-2 call would bleed one
        # pixel past the tile rect into the neighboring tile
        for w in range(OVERLAY_WIDTH):
            if x1 - 1 - w < x0 + w or y1 - 1 - w < y0 + w:
                break
            cv2.rectangle(out, (x0 + w, y0 + w), (x1 - 1 - w, y1 - 1 - w),
                          OVERLAY_INTENSITY, 1)
        if x1 - x0 >= 36 and y1 - y0 >= 14:
            cv2.putText(out, f"{tile.score:.2f}", (x0 + 3, y0 + 11),
                        cv2.FONT_HERSHEY_PLAIN, 0.8, OVERLAY_INTENSITY, 1,
                        cv2.LINE_8)
    return out


def write_report(result: DetectionResult, path: str | Path,
                 model_descriptor: str = "") -> Path:
    """One JSON line per flagged tile, then a summary record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in result.flagged:
        x0, y0, x1, y1 = t.rect
        lines.append(json.dumps({
            "image_id": result.image_id, "col": t.col, "row": t.row,
            "x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1,
            "score": round(t.score, 6),
        }, sort_keys=True))
    lines.append(json.dumps({
        "summary": {
            "image_id": result.image_id,
            "grid": {"m": result.grid.m, "n": result.grid.n},
            "threshold": result.threshold,
            "model": model_descriptor,
            "flagged": len(result.flagged),
        }
    }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path: str | Path) -> tuple[list[dict], dict]:
    """Parse a detection report back into (flagged rows, summary)."""
    rows, summary = [], {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if "summary" in rec:
            summary = rec["summary"]
        else:
            rows.append(rec)
    return rows, summary


def ground_truth_flags(image: AnnotatedImage, crop_box: CropBox,
                       grid: GridSpec) -> set[tuple[int, int]]:
    """(col,row) cells a perfect detector would flag, from the annotations."""
    from .preprocess import crop_and_remap, tile_and_label

    cropped, _ = crop_and_remap(image, crop_box)
    return {(t.col, t.row) for t in tile_and_label(cropped, grid)
            if t.label == 1}
