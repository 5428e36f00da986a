"""Even-odd balanced resampling with dihedral augmentation, and splitting.

Balancing walks index 0..|E|-1 drawing a random defective tile at even
indices and a random non-defective tile at odd indices (with replacement),
applying a random rotation/flip to every draw. The result has the same size
as the input with the classes equalized. Splitting is stratified per class
with a seeded shuffle and contiguous cuts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import (
    DatasetManifest,
    TileEntry,
    TileRecord,
    ValidationError,
    load_gray_png,
    save_gray_png,
)

logger = logging.getLogger(__name__)

# Dihedral group of the square. Ids 0-7; only the shape-preserving four are
# valid on non-square tiles.
IDENTITY = 0
ROT90 = 1
ROT180 = 2
ROT270 = 3
FLIP_H = 4
FLIP_V = 5
TRANSPOSE = 6
ANTI_TRANSPOSE = 7

SQUARE_TRANSFORMS: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
RECT_TRANSFORMS: tuple[int, ...] = (IDENTITY, ROT180, FLIP_H, FLIP_V)

TRANSFORM_NAMES = {
    IDENTITY: "identity", ROT90: "rot90", ROT180: "rot180", ROT270: "rot270",
    FLIP_H: "flip-h", FLIP_V: "flip-v", TRANSPOSE: "transpose",
    ANTI_TRANSPOSE: "anti-transpose",
}


def valid_transforms(shape: tuple[int, ...]) -> tuple[int, ...]:
    return SQUARE_TRANSFORMS if shape[0] == shape[1] else RECT_TRANSFORMS


def apply_transform(pixels: np.ndarray, t: int) -> np.ndarray:
    """Apply dihedral transform ``t`` to a 2-D raster."""
    if t not in SQUARE_TRANSFORMS:
        raise ValidationError(f"unknown transform id {t}")
    if t not in valid_transforms(pixels.shape):
        raise ValidationError(
            f"transform {TRANSFORM_NAMES[t]} changes the shape of a "
            f"non-square {pixels.shape[0]}x{pixels.shape[1]} tile"
        )
    if t == IDENTITY:
        out = pixels
    elif t == ROT90:
        out = np.rot90(pixels, 1)
    elif t == ROT180:
        out = np.rot90(pixels, 2)
    elif t == ROT270:
        out = np.rot90(pixels, 3)
    elif t == FLIP_H:
        out = np.fliplr(pixels)
    elif t == FLIP_V:
        out = np.flipud(pixels)
    elif t == TRANSPOSE:
        out = pixels.T
    else:  # ANTI_TRANSPOSE
        out = np.rot90(pixels, 2).T
    return np.ascontiguousarray(out)


def augment_tile(tile: TileRecord, t: int) -> TileRecord:
    """Transformed copy of a tile; label and grid position are preserved."""
    return TileRecord(image_id=tile.image_id, col=tile.col, row=tile.row,
                      rect=tile.rect, label=tile.label,
                      pixels=apply_transform(tile.pixels, t), transform_id=t)


class BalanceDraw(NamedTuple):
    draw_index: int
    label: int
    source_pos: int  # index into the class's entry list
    transform_id: int


def balance_plan(square_by_class: dict[int, list[bool]], total: int,
                 seed: int) -> list[BalanceDraw]:
    """Draw sequence for balancing, fully determined by ``seed``.

    ``square_by_class[label][i]`` says whether that class's i-th tile is
    square (and therefore eligible for all eight transforms). One RNG stream
    drives the walk: at each index, first the tile choice, then the
    transform choice.
    """
    for label in (0, 1):
        if not square_by_class.get(label):
            raise ValidationError(
                f"cannot balance: class {label} has no tiles"
            )
    if total <= 0:
        raise ValidationError("cannot balance an empty dataset")
    rng = np.random.default_rng(seed)
    plan: list[BalanceDraw] = []
    for index in range(total):
        label = 1 if index % 2 == 0 else 0
        flags = square_by_class[label]
        pos = int(rng.integers(len(flags)))
        choices = SQUARE_TRANSFORMS if flags[pos] else RECT_TRANSFORMS
        t = int(choices[rng.integers(len(choices))])
        plan.append(BalanceDraw(index, label, pos, t))
    return plan


def balance_dataset(manifest: DatasetManifest, seed: int,
                    out_dir: str | Path) -> DatasetManifest:
    """Resample ``manifest`` into a class-balanced dataset of equal size.

    Defective count comes out as ceil(|E|/2), non-defective as floor(|E|/2).
    Every output tile records its source tile, transform id, and draw index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_class = {0: manifest.class_entries(0), 1: manifest.class_entries(1)}

    # Unique source tiles only; repeated draws reuse the cached raster.
    cache: dict[str, np.ndarray] = {}

    def pixels_of(entry: TileEntry) -> np.ndarray:
        if entry.path not in cache:
            cache[entry.path] = load_gray_png(manifest.resolve(entry))
        return cache[entry.path]

    square_by_class = {
        label: [pixels_of(e).shape[0] == pixels_of(e).shape[1]
                for e in items]
        for label, items in by_class.items()
    }
    plan = balance_plan(square_by_class, len(manifest), seed)

    entries: list[TileEntry] = []
    for draw in plan:
        src = by_class[draw.label][draw.source_pos]
        pixels = apply_transform(pixels_of(src), draw.transform_id)
        stem = Path(src.path).stem
        name = f"{stem}_d{draw.draw_index}.png"
        save_gray_png(out_dir / name, pixels)
        entries.append(TileEntry(
            path=name, label=src.label, image_id=src.image_id,
            col=src.col, row=src.row, source=src.path,
            transform_id=draw.transform_id, draw_index=draw.draw_index,
        ))

    counts = {0: len(manifest) // 2, 1: math.ceil(len(manifest) / 2)}
    balanced = DatasetManifest(
        entries=tuple(entries), counts=counts, grid=manifest.grid, seed=seed,
        source=str(manifest.root / "manifest.json") if manifest.root else None,
        params={"balanced_from": {"0": manifest.counts.get(0, 0),
                                  "1": manifest.counts.get(1, 0)}},
        root=out_dir,
    )
    balanced.save(out_dir / "manifest.json")
    return balanced


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios (must sum to 1) plus the shuffle seed."""

    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValidationError("split ratios must be nonnegative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValidationError(
                f"split ratios must sum to 1, got "
                f"{self.train}+{self.val}+{self.test}"
            )


def split_dataset(manifest: DatasetManifest, spec: SplitSpec) \
        -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Stratified train/val/test partition of a tile manifest.

    Within each class: seeded shuffle, then contiguous cuts with val and
    test sizes rounded down and the remainder going to train.
    """
    if len(manifest) < 10:
        raise ValidationError(f"need at least 10 tiles to split, "
                              f"got {len(manifest)}")
    rng = np.random.default_rng(spec.seed)
    parts: dict[str, list[TileEntry]] = {"train": [], "val": [], "test": []}
    for label in (0, 1):
        items = manifest.class_entries(label)
        order = rng.permutation(len(items))
        n_val = int(len(items) * spec.val)
        n_test = int(len(items) * spec.test)
        n_train = len(items) - n_val - n_test
        shuffled = [items[i] for i in order]
        parts["train"].extend(shuffled[:n_train])
        parts["val"].extend(shuffled[n_train:n_train + n_val])
        parts["test"].extend(shuffled[n_train + n_val:])

    for name, items in parts.items():
        if not items:
            raise ValidationError(f"split '{name}' is empty after rounding; "
                                  "adjust ratios or dataset size")

    def make(name: str, items: list[TileEntry]) -> DatasetManifest:
        counts = {0: sum(1 for e in items if e.label == 0),
                  1: sum(1 for e in items if e.label == 1)}
        return DatasetManifest(
            entries=tuple(items), counts=counts, grid=manifest.grid,
            seed=spec.seed,
            source=str(manifest.root / "manifest.json") if manifest.root else None,
            params={"split": name, "ratios": {"train": spec.train,
                                              "val": spec.val,
                                              "test": spec.test}},
            root=manifest.root,
        )

    return (make("train", parts["train"]), make("val", parts["val"]),
            make("test", parts["test"]))
