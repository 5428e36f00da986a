"""Tile-based surface defect detection.

Small annotated image sets become tile-level training data (edge-based
crop, grid split, class balancing with dihedral augmentation), a transfer
classifier scores tiles, and a sliding-grid detector flags defective cells
on new images.
"""

from .core import (
    AnnotatedImage,
    DatasetManifest,
    DefectBox,
    GridSpec,
    PipelineError,
    TileEntry,
    TileRecord,
    ValidationError,
    load_source_manifest,
    tile_filename,
    write_source_manifest,
)
from .detect import (
    DetectionConfig,
    DetectionResult,
    detect_defects,
    render_overlay,
    write_report,
)
from .enhance import (
    SplitSpec,
    apply_transform,
    balance_dataset,
    split_dataset,
)
from .metrics import (
    MetricsReport,
    compute_report,
    evaluate_tiles,
    format_report_table,
)
from .model import (
    ClassifierConfig,
    TrainedModel,
    build_classifier,
    load_model,
    resolve_backbone,
    save_model,
    train,
)
from .preprocess import (
    compute_crop_box,
    crop_and_remap,
    preprocess_dataset,
    tile_and_label,
)
from .synthgen import SceneSpec, generate_dataset, generate_image

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage",
    "ClassifierConfig",
    "DatasetManifest",
    "DefectBox",
    "DetectionConfig",
    "DetectionResult",
    "GridSpec",
    "MetricsReport",
    "PipelineError",
    "SceneSpec",
    "SplitSpec",
    "TileEntry",
    "TileRecord",
    "TrainedModel",
    "ValidationError",
    "apply_transform",
    "balance_dataset",
    "build_classifier",
    "compute_crop_box",
    "compute_report",
    "crop_and_remap",
    "detect_defects",
    "evaluate_tiles",
    "format_report_table",
    "generate_dataset",
    "generate_image",
    "load_model",
    "load_source_manifest",
    "preprocess_dataset",
    "render_overlay",
    "resolve_backbone",
    "save_model",
    "split_dataset",
    "tile_and_label",
    "tile_filename",
    "train",
    "write_report",
    "write_source_manifest",
]
