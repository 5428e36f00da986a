"""Deterministic synthetic inspection images with exact defect ground truth.

Renders a bright object (rounded rectangle, ellipse, or octagon) on a
near-black background, textured with a sinusoidal stripe field, then draws
scratch and dirt defects whose pixel-tight bounding boxes become the
annotations. Every image is a pure function of (seed, index), so datasets
regenerate byte-identically. Defect geometry is sampled in the object's
frame from its own RNG stream, so switching the object shape keeps the
defect layout — handy for controlled source-to-target experiments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import (
    AnnotatedImage,
    DefectBox,
    PipelineError,
    write_source_manifest,
)

logger = logging.getLogger(__name__)

SHAPES = ("rounded-rectangle", "ellipse", "polygon")
DEFECT_KINDS = ("scratch", "dirt")

# Defects are confined to the central part of the object frame, which all
# three silhouettes cover; placement then never needs shape-aware retries.
SAFE_INSET = 0.22
MAX_PLACEMENT_RETRIES = 8


class GenerationError(PipelineError):
    """A defect could not be placed on the object."""


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "rounded-rectangle"
    width: int = 256
    height: int = 192
    background: tuple[int, int] = (0, 10)
    object_band: tuple[int, int] = (140, 190)
    stripe_amplitude: float = 22.0
    stripe_period: float = 24.0
    min_defects: int = 0
    max_defects: int = 3
    defect_kinds: tuple[str, ...] = DEFECT_KINDS
    defect_contrast: int = 110
    margin_frac: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise PipelineError(f"unknown object shape '{self.shape}'; "
                                f"expected one of {SHAPES}")
        if self.width < 16 or self.height < 16:
            raise PipelineError("image must be at least 16x16")
        if not 0 <= self.min_defects <= self.max_defects:
            raise PipelineError("need 0 <= min_defects <= max_defects")
        if self.defect_contrast < 1:
            raise PipelineError("defect_contrast must be positive")
        for kind in self.defect_kinds:
            if kind not in DEFECT_KINDS:
                raise PipelineError(f"unknown defect kind '{kind}'")
        if self.stripe_period <= 0:
            raise PipelineError("stripe_period must be positive")


def _object_frame(spec: SceneSpec, rng: np.random.Generator) \
        -> tuple[int, int, int, int]:
    """Jittered bounding box of the object inside the image."""
    jit = rng.uniform(0.0, 0.04, size=4)
    x0 = int(spec.width * (spec.margin_frac + jit[0]))
    y0 = int(spec.height * (spec.margin_frac + jit[1]))
    x1 = int(spec.width * (1 - spec.margin_frac - jit[2]))
    y1 = int(spec.height * (1 - spec.margin_frac - jit[3]))
    return x0, y0, x1, y1


def _silhouette(spec: SceneSpec, frame: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = frame
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    fw, fh = x1 - x0, y1 - y0
    if spec.shape == "rounded-rectangle":
        r = int(0.18 * min(fw, fh))
        cv2.rectangle(mask, (x0 + r, y0), (x1 - 1 - r, y1 - 1), 255, -1)
        cv2.rectangle(mask, (x0, y0 + r), (x1 - 1, y1 - 1 - r), 255, -1)
        for cx, cy in ((x0 + r, y0 + r), (x1 - 1 - r, y0 + r),
                       (x0 + r, y1 - 1 - r), (x1 - 1 - r, y1 - 1 - r)):
            cv2.circle(mask, (cx, cy), r, 255, -1)
    elif spec.shape == "ellipse":
        cv2.ellipse(mask, ((x0 + x1) // 2, (y0 + y1) // 2),
                    (fw // 2, fh // 2), 0, 0, 360, 255, -1)
    else:  # octagon
        cw, ch = int(0.145 * fw), int(0.145 * fh)
        pts = np.array([
            (x0 + cw, y0), (x1 - 1 - cw, y0), (x1 - 1, y0 + ch),
            (x1 - 1, y1 - 1 - ch), (x1 - 1 - cw, y1 - 1), (x0 + cw, y1 - 1),
            (x0, y1 - 1 - ch), (x0, y0 + ch),
        ], dtype=np.int32)
        cv2.fillPoly(mask, [pts], 255)
    return mask


def _render_base(spec: SceneSpec, rng: np.random.Generator) \
        -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    """Defect-free scene: (image, object mask, object frame)."""
    frame = _object_frame(spec, rng)
    bg = int(rng.integers(spec.background[0], spec.background[1] + 1))
    base = float(rng.integers(spec.object_band[0], spec.object_band[1] + 1))
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)

    img = np.full((spec.height, spec.width), bg, dtype=np.uint8)
    mask = _silhouette(spec, frame)
    ys, xs = np.nonzero(mask)
    wave = np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta))
                  / spec.stripe_period + phase)
    noise = rng.normal(0.0, 2.0, size=len(xs))
    values = base + spec.stripe_amplitude * wave + noise
    img[ys, xs] = np.clip(values, 15, 240).astype(np.uint8)
    return img, mask, frame


def _safe_box(frame: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = frame
    fw, fh = x1 - x0, y1 - y0
    return (x0 + int(SAFE_INSET * fw), y0 + int(SAFE_INSET * fh),
            x1 - int(SAFE_INSET * fw), y1 - int(SAFE_INSET * fh))


def _defect_mask(spec: SceneSpec, kind: str, safe: tuple[int, int, int, int],
                 rng: np.random.Generator) -> np.ndarray:
    sx0, sy0, sx1, sy1 = safe
    sw, sh = sx1 - sx0, sy1 - sy0
    scale = min(sw, sh)
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)

    def clip_pt(x: float, y: float) -> tuple[int, int]:
        return (int(np.clip(x, sx0, sx1 - 1)), int(np.clip(y, sy0, sy1 - 1)))

    if kind == "scratch":
        n_seg = int(rng.integers(2, 5))
        x = sx0 + rng.uniform(0, 1) * sw
        y = sy0 + rng.uniform(0, 1) * sh
        angle = rng.uniform(0, 2 * np.pi)
        thickness = int(rng.integers(1, 3))
        pt = clip_pt(x, y)
        for _ in range(n_seg):
            angle += rng.uniform(-0.6, 0.6)
            length = rng.uniform(0.10, 0.25) * scale
            x += length * np.cos(angle)
            y += length * np.sin(angle)
            nxt = clip_pt(x, y)
            cv2.line(mask, pt, nxt, 255, thickness, cv2.LINE_8)
            pt = nxt
    else:  # dirt
        a = max(1.0, rng.uniform(0.03, 0.08) * scale)
        b = max(1.0, a * rng.uniform(0.5, 1.0))
        rot = rng.uniform(0, 180)
        pad = int(np.ceil(max(a, b))) + 1
        cx = sx0 + pad + rng.uniform(0, 1) * max(sw - 2 * pad, 1)
        cy = sy0 + pad + rng.uniform(0, 1) * max(sh - 2 * pad, 1)
        cv2.ellipse(mask, (int(np.clip(cx, sx0, sx1 - 1)),
                           int(np.clip(cy, sy0, sy1 - 1))),
                    (int(a), int(b)), rot, 0, 360, 255, -1)
        mask[:sy0, :] = 0
        mask[sy1:, :] = 0
        mask[:, :sx0] = 0
        mask[:, sx1:] = 0
    return mask


def generate_image(spec: SceneSpec, index: int) -> AnnotatedImage:
    """Render scene ``index``; deterministic for a given (spec.seed, index)."""
    scene_rng = np.random.default_rng([spec.seed, index, 0])
    defect_rng = np.random.default_rng([spec.seed, index, 1])

    img, object_mask, frame = _render_base(spec, scene_rng)
    img = img.copy()  # base render stays referenced by nothing; copy is cheap

    n_defects = int(defect_rng.integers(spec.min_defects,
                                        spec.max_defects + 1))
    boxes: list[DefectBox] = []
    if n_defects > 0:
        safe = _safe_box(frame)
        if safe[2] - safe[0] < 4 or safe[3] - safe[1] < 4:
            raise GenerationError(
                f"object too small to place defects: safe region "
                f"{safe[2] - safe[0]}x{safe[3] - safe[1]} px"
            )
        for _ in range(n_defects):
            kind = spec.defect_kinds[
                int(defect_rng.integers(len(spec.defect_kinds)))]
            for attempt in range(MAX_PLACEMENT_RETRIES):
                mask = _defect_mask(spec, kind, safe, defect_rng)
                hit = mask > 0
                before = img.copy()
                img[hit] = np.clip(img[hit].astype(np.int16)
                                   - spec.defect_contrast, 0, 255).astype(np.uint8)
                changed = img != before
                ys, xs = np.nonzero(changed)
                if len(xs) and bool(np.all(object_mask[ys, xs] > 0)):
                    boxes.append(DefectBox(int(xs.min()), int(ys.min()),
                                           int(xs.max()) + 1, int(ys.max()) + 1,
                                           kind))
                    break
                img = before  # undo and retry with fresh draws
            else:
                raise GenerationError(
                    f"could not place a {kind} defect on image {index} "
                    f"after {MAX_PLACEMENT_RETRIES} attempts"
                )

    return AnnotatedImage(image_id=f"img{index:04d}", width=spec.width,
                          height=spec.height, pixels=img,
                          defects=tuple(boxes))


def generate_dataset(spec: SceneSpec, count: int,
                     out_dir: str | Path) -> Path:
    """Write ``count`` images plus their annotation manifest; returns its path."""
    if count < 1:
        raise PipelineError(f"count must be at least 1, got {count}")
    out_dir = Path(out_dir)
    images = [generate_image(spec, i) for i in range(count)]
    n_defects = sum(len(img.defects) for img in images)
    logger.info("generated %d %s images (%d defects) under %s",
                count, spec.shape, n_defects, out_dir)
    return write_source_manifest(
        images, out_dir,
        extra={"generator": {
            "shape": spec.shape, "seed": spec.seed, "count": count,
            "size": [spec.width, spec.height],
            "defects": [spec.min_defects, spec.max_defects],
            "contrast": spec.defect_contrast,
        }},
    )
