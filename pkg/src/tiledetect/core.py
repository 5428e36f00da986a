"""Domain types, annotation/tile manifest I/O, and the tile naming scheme.

Everything downstream (preprocessing, balancing, training, detection) works
in terms of these types. Coordinates are integer pixels, origin top-left,
half-open intervals: a box (x_min, y_min, x_max, y_max) covers the pixels
x_min <= x < x_max and y_min <= y < y_max.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SOURCE_MANIFEST_SCHEMA = "defect-source-manifest/1"
TILE_MANIFEST_SCHEMA = "defect-tile-manifest/1"

# Image ids ending in "_<digits>" could make two distinct (id, col, row)
# triples collide in tile_filename; rejected at manifest load.
_ID_DIGIT_SUFFIX = re.compile(r"_\d+$")


class PipelineError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(PipelineError):
    """Invalid input data, configuration, or precondition violation."""


@dataclass(frozen=True)
class DefectBox:
    """Axis-aligned defect bounding box in pixel coordinates (half-open)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    kind: str | None = None  # informational only, never used by logic

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValidationError(
                f"degenerate defect box ({self.x_min},{self.y_min},"
                f"{self.x_max},{self.y_max})"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def shift(self, dx: int, dy: int) -> DefectBox:
        return DefectBox(self.x_min + dx, self.y_min + dy,
                         self.x_max + dx, self.y_max + dy, self.kind)

    def clip(self, width: int, height: int) -> DefectBox | None:
        """Intersect with [0,width)x[0,height); None if the result is empty."""
        return self.clip_to(0, 0, width, height)

    def clip_to(self, x0: int, y0: int, x1: int, y1: int) -> DefectBox | None:
        """Intersect with the rectangle [x0,x1)x[y0,y1); None if empty."""
        cx0 = max(self.x_min, x0)
        cy0 = max(self.y_min, y0)
        cx1 = min(self.x_max, x1)
        cy1 = min(self.y_max, y1)
        if cx0 >= cx1 or cy0 >= cy1:
            return None
        return DefectBox(cx0, cy0, cx1, cy1, self.kind)

    def inside(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and \
            self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class AnnotatedImage:
    """A grayscale image plus its defect boxes.

    ``pixels`` is an 8-bit (height, width) array; it is marked read-only so
    instances can be shared safely across workers.
    """

    image_id: str
    width: int
    height: int
    pixels: np.ndarray
    defects: tuple[DefectBox, ...] = ()

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValidationError(
                f"image '{self.image_id}': pixel array shape "
                f"{self.pixels.shape} does not match {self.height}x{self.width}"
            )
        self.pixels.setflags(write=False)
        for box in self.defects:
            if not box.inside(self.width, self.height):
                raise ValidationError(
                    f"image '{self.image_id}': defect box ({box.x_min},{box.y_min},"
                    f"{box.x_max},{box.y_max}) outside {self.width}x{self.height}"
                )


@dataclass(frozen=True)
class GridSpec:
    """m columns by n rows."""

    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.m}x{self.n}")

    @property
    def cells(self) -> int:
        return self.m * self.n


@dataclass(frozen=True)
class TileRecord:
    """One grid cell of an image, with its binary label and pixel payload."""

    image_id: str
    col: int
    row: int
    rect: tuple[int, int, int, int]  # (x0, y0, x1, y1) in the parent image
    label: int
    pixels: np.ndarray
    transform_id: int | None = None  # set when the tile came out of augmentation

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"tile label must be 0 or 1, got {self.label}")
        self.pixels.setflags(write=False)


@dataclass(frozen=True)
class TileEntry:
    """Manifest row: a tile on disk plus its label and provenance."""

    path: str  # relative to the manifest's directory
    label: int
    image_id: str
    col: int
    row: int
    source: str | None = None        # source tile path (balanced datasets)
    transform_id: int | None = None  # augmentation applied to the source
    draw_index: int | None = None    # position in the balancing draw sequence

    def to_json(self) -> dict:
        d = {"path": self.path, "label": self.label, "image_id": self.image_id,
             "col": self.col, "row": self.row}
        if self.source is not None:
            d["source"] = self.source
        if self.transform_id is not None:
            d["transform_id"] = self.transform_id
        if self.draw_index is not None:
            d["draw_index"] = self.draw_index
        return d

    @classmethod
    def from_json(cls, d: dict) -> TileEntry:
        return cls(path=d["path"], label=int(d["label"]), image_id=d["image_id"],
                   col=int(d["col"]), row=int(d["row"]),
                   source=d.get("source"), transform_id=d.get("transform_id"),
                   draw_index=d.get("draw_index"))


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered tile entries with per-class counts and provenance."""

    entries: tuple[TileEntry, ...]
    counts: dict[int, int]
    grid: GridSpec | None = None
    seed: int | None = None
    source: str | None = None
    params: dict = field(default_factory=dict)
    root: Path | None = None  # directory the entry paths are relative to

    def __post_init__(self):
        want = {0: 0, 1: 0}
        for e in self.entries:
            want[e.label] += 1
        if want != {0: self.counts.get(0, 0), 1: self.counts.get(1, 0)}:
            raise ValidationError(
                f"manifest counts {self.counts} do not match entries {want}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def class_entries(self, label: int) -> list[TileEntry]:
        return [e for e in self.entries if e.label == label]

    def resolve(self, entry: TileEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.path

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "schema": TILE_MANIFEST_SCHEMA,
            "counts": {"0": self.counts.get(0, 0), "1": self.counts.get(1, 0)},
            "grid": {"m": self.grid.m, "n": self.grid.n} if self.grid else None,
            "seed": self.seed,
            "source": self.source,
            "params": self.params,
            "entries": [e.to_json() for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"tile manifest not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
        if doc.get("schema") != TILE_MANIFEST_SCHEMA:
            raise ValidationError(f"{path}: unexpected schema {doc.get('schema')!r}")
        grid = GridSpec(**doc["grid"]) if doc.get("grid") else None
        entries = tuple(TileEntry.from_json(e) for e in doc["entries"])
        counts = {0: int(doc["counts"]["0"]), 1: int(doc["counts"]["1"])}
        return cls(entries=entries, counts=counts, grid=grid,
                   seed=doc.get("seed"), source=doc.get("source"),
                   params=doc.get("params", {}), root=path.parent)


def tile_filename(label: int, image_id: str, col: int, row: int) -> str:
    """Unique on-disk name for a tile: ``{label}_{image_id}_{col}_{row}.png``."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    if col < 0 or row < 0:
        raise ValidationError(f"col/row must be nonnegative, got ({col},{row})")
    validate_image_id(image_id)
    return f"{label}_{image_id}_{col}_{row}.png"


def validate_image_id(image_id: str) -> None:
    """Reject ids that would break filename uniqueness or path safety."""
    if not image_id:
        raise ValidationError("empty image id")
    if "/" in image_id or "\\" in image_id:
        raise ValidationError(f"image id {image_id!r} contains a path separator")
    if _ID_DIGIT_SUFFIX.search(image_id):
        raise ValidationError(
            f"image id {image_id!r} ends in '_<digits>', which can collide "
            "with tile column/row filename components"
        )


def load_gray_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit single-channel PNG as a (height, width) uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"image file not found: {path}")
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        return np.asarray(img, dtype=np.uint8)


def save_gray_png(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def load_source_manifest(path: str | Path) -> list[AnnotatedImage]:
    """Load annotated source images from a JSON manifest.

    The manifest has a top-level ``images`` list of records with ``id``,
    ``path`` (PNG, relative to the manifest), ``width``, ``height`` and a
    ``defects`` list of box records. Boxes are validated against the image
    bounds; violations are reported with the offending image id.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"source manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise ValidationError(f"{path}: missing top-level 'images' key")

    images: list[AnnotatedImage] = []
    seen_ids: set[str] = set()
    for rec in doc["images"]:
        try:
            image_id = rec["id"]
            width, height = int(rec["width"]), int(rec["height"])
            rel = rec["path"]
            defect_recs = rec.get("defects", [])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: malformed image record ({exc})") from exc
        validate_image_id(image_id)
        if image_id in seen_ids:
            raise ValidationError(f"{path}: duplicate image id '{image_id}'")
        seen_ids.add(image_id)

        defects = []
        for b in defect_recs:
            try:
                box = DefectBox(int(b["x_min"]), int(b["y_min"]),
                                int(b["x_max"]), int(b["y_max"]), b.get("kind"))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(
                    f"image '{image_id}': malformed defect record ({exc})"
                ) from exc
            if not box.inside(width, height):
                raise ValidationError(
                    f"image '{image_id}': defect box ({box.x_min},{box.y_min},"
                    f"{box.x_max},{box.y_max}) outside {width}x{height}"
                )
            defects.append(box)

        pixels = load_gray_png(path.parent / rel)
        if pixels.shape != (height, width):
            raise ValidationError(
                f"image '{image_id}': file {rel} is {pixels.shape[1]}x"
                f"{pixels.shape[0]}, manifest says {width}x{height}"
            )
        images.append(AnnotatedImage(image_id=image_id, width=width,
                                     height=height, pixels=pixels,
                                     defects=tuple(defects)))
    return images


def write_source_manifest(images: list[AnnotatedImage], out_dir: str | Path,
                          image_paths: dict[str, str] | None = None,
                          extra: dict | None = None) -> Path:
    """Write images as PNGs plus a manifest under ``out_dir``.

    ``image_paths`` maps image_id to a relative PNG path; by default each
    image is saved as ``<image_id>.png`` next to the manifest. ``extra``
    merges additional top-level keys into the manifest (readers ignore
    anything but ``schema`` and ``images``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = []
    for img in images:
        validate_image_id(img.image_id)
        rel = (image_paths or {}).get(img.image_id, f"{img.image_id}.png")
        save_gray_png(out_dir / rel, img.pixels)
        recs.append({
            "id": img.image_id,
            "path": rel,
            "width": img.width,
            "height": img.height,
            "defects": [
                {"x_min": b.x_min, "y_min": b.y_min,
                 "x_max": b.x_max, "y_max": b.y_max,
                 **({"kind": b.kind} if b.kind is not None else {})}
                for b in img.defects
            ],
        })
    manifest_path = out_dir / "manifest.json"
    doc = {"schema": SOURCE_MANIFEST_SCHEMA, "images": recs, **(extra or {})}
    manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest_path
