"""Command-line driver for the tile-classification defect pipeline.

One subcommand per pipeline stage, handing off through files under a
working directory:

    synth -> preprocess -> enhance -> train -> evaluate
                                         `---> detect

All stages share a YAML config of dotted keys (``grid.m``, ``model.epochs``,
...). Unknown keys are rejected; every key can be overridden on the command
line with a flag of the same name. Exit codes: 0 success, 1 invalid
input/config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import yaml
from filelock import FileLock, Timeout

from .core import (
    DatasetManifest,
    GridSpec,
    PipelineError,
    ValidationError,
    load_source_manifest,
    save_gray_png,
)
from .detect import DetectionConfig, detect_defects, render_overlay, write_report
from .enhance import SplitSpec, balance_dataset, split_dataset
from .metrics import evaluate_tiles, format_report_table
from .model import (
    ClassifierConfig,
    build_classifier,
    load_model,
    resolve_backbone,
    save_model,
    train,
)
from .preprocess import preprocess_dataset
from .synthgen import SceneSpec, generate_dataset

logger = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "enhance", "train", "evaluate", "detect")

# Every recognized config key with its default. Keys group by stage; the
# plain `seed` feeds any stage seed left unset.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "run.workdir": "run",
    "run.lock_timeout": 60.0,
    "grid.m": 10,
    "grid.n": 10,
    "canny.low": 50.0,
    "canny.high": 150.0,
    "canny.sigma": 1.4,
    "split.train": 0.8,
    "split.val": 0.1,
    "split.test": 0.1,
    "model.backbone": "xception-class",
    "model.pretrained": False,
    "model.dropout": 0.2,
    "model.epochs": 50,
    "model.batch_size": 32,
    "model.lr": 1e-4,
    "model.seed": None,
    "model.freeze_epochs": 0,
    "synth.shape": "rounded-rectangle",
    "synth.count": 24,
    "synth.width": 256,
    "synth.height": 192,
    "synth.background": [0, 10],
    "synth.object_band": [140, 190],
    "synth.stripe_amplitude": 22.0,
    "synth.stripe_period": 24.0,
    "synth.min_defects": 0,
    "synth.max_defects": 3,
    "synth.defect_kinds": ["scratch", "dirt"],
    "synth.defect_contrast": 110,
    "synth.margin_frac": 0.08,
    "synth.seed": None,
    "preprocess.workers": 1,
    "evaluate.split": "test",
    "evaluate.threshold": 0.5,
    "detect.threshold": 0.7,
    "detect.crop": True,
    "detect.overlays": True,
    "paths.source": "",
    "paths.tiles": "",
    "paths.enhanced": "",
    "paths.model": "",
    "paths.reports": "",
    "paths.target": "",
}

# Keys whose None default means "use the run seed".
_INHERIT_SEED = ("model.seed", "synth.seed")

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _coerce(key: str, value: object) -> object:
    """Convert a YAML or flag value to the type of the key's default."""
    default = DEFAULTS[key]
    kind = int if default is None else type(default)
    if value is None:
        raise ValidationError(f"config key '{key}' has no value")
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if kind is int:
            if isinstance(value, bool):
                raise ValueError(f"expected an integer, got {value!r}")
            if isinstance(value, float) and value != int(value):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if kind is float:
            return float(value)
        if kind is list:
            if isinstance(value, str):
                value = [part.strip() for part in value.split(",")]
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"expected a list, got {value!r}")
            elem = type(default[0])
            return [elem(v) for v in value]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config key '{key}': {exc}") from exc


def _flatten(doc: Mapping, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


@dataclass(frozen=True)
class PipelineConfig:
    """Fully resolved configuration: every key in DEFAULTS has a value."""

    values: Mapping[str, object]

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    @classmethod
    def load(cls, path: str | Path,
             overrides: Mapping[str, object] | None = None) -> PipelineConfig:
        """Read a YAML config, apply overrides, fill defaults.

        Keys may be nested mappings or dotted (``grid: {m: 12}`` and
        ``grid.m: 12`` are equivalent). Unknown keys are an error.
        """
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML ({exc})") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config root must be a mapping")
        flat = _flatten(raw)
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ValidationError(
                f"{path}: unknown config keys: {', '.join(unknown)}"
            )
        values = dict(DEFAULTS)
        for key, value in flat.items():
            values[key] = _coerce(key, value)
        for key, value in (overrides or {}).items():
            values[key] = _coerce(key, value)
        for key in _INHERIT_SEED:
            if values[key] is None:
                values[key] = values["seed"]
        return cls(values=values)

    # Stage-object views -------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(int(self["grid.m"]), int(self["grid.n"]))

    def split(self) -> SplitSpec:
        return SplitSpec(train=float(self["split.train"]),
                         val=float(self["split.val"]),
                         test=float(self["split.test"]),
                         seed=int(self["seed"]))

    def scene(self) -> SceneSpec:
        return SceneSpec(
            shape=str(self["synth.shape"]),
            width=int(self["synth.width"]),
            height=int(self["synth.height"]),
            background=tuple(self["synth.background"]),
            object_band=tuple(self["synth.object_band"]),
            stripe_amplitude=float(self["synth.stripe_amplitude"]),
            stripe_period=float(self["synth.stripe_period"]),
            min_defects=int(self["synth.min_defects"]),
            max_defects=int(self["synth.max_defects"]),
            defect_kinds=tuple(self["synth.defect_kinds"]),
            defect_contrast=int(self["synth.defect_contrast"]),
            margin_frac=float(self["synth.margin_frac"]),
            seed=int(self["synth.seed"]),
        )

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(
            dropout=float(self["model.dropout"]),
            epochs=int(self["model.epochs"]),
            batch_size=int(self["model.batch_size"]),
            learning_rate=float(self["model.lr"]),
            seed=int(self["model.seed"]),
            freeze_epochs=int(self["model.freeze_epochs"]),
        )

    def workdir(self) -> Path:
        return Path(str(self["run.workdir"]))


def _stage_dir(cfg: PipelineConfig, override: str | None, key: str,
               fallback: str) -> Path:
    """Output/input directory: flag beats config path beats workdir layout."""
    if override:
        return Path(override)
    if cfg[key]:
        return Path(str(cfg[key]))
    return cfg.workdir() / fallback


def _manifest_in(path: Path) -> Path:
    return path if path.suffix == ".json" else path / "manifest.json"


# ---------------------------------------------------------------------------
# Stages. Each returns a dict recorded in the run log.


def _run_synth(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    out = _stage_dir(cfg, ns.out, "paths.source", "source")
    manifest = generate_dataset(cfg.scene(), int(cfg["synth.count"]), out)
    print(f"synth: {cfg['synth.count']} images -> {manifest}")
    return {"manifest": str(manifest), "images": int(cfg["synth.count"])}


def _run_preprocess(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    src = _manifest_in(_stage_dir(cfg, ns.source, "paths.source", "source"))
    images = load_source_manifest(src)
    out = _stage_dir(cfg, ns.out, "paths.tiles", "tiles")
    manifest = preprocess_dataset(
        images, cfg.grid(), out,
        low=float(cfg["canny.low"]), high=float(cfg["canny.high"]),
        sigma=float(cfg["canny.sigma"]), source_path=str(src),
        workers=int(cfg["preprocess.workers"]),
    )
    print(f"preprocess: {len(manifest)} tiles "
          f"({manifest.counts[1]} defective / {manifest.counts[0]} clean) "
          f"-> {out}")
    return {"manifest": str(out / "manifest.json"), "tiles": len(manifest),
            "defective": manifest.counts[1], "clean": manifest.counts[0]}


def _run_enhance(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    tiles = _manifest_in(_stage_dir(cfg, ns.tiles, "paths.tiles", "tiles"))
    manifest = DatasetManifest.load(tiles)
    out = _stage_dir(cfg, ns.out, "paths.enhanced", "enhanced")
    balanced = balance_dataset(manifest, int(cfg["seed"]), out)
    splits = split_dataset(balanced, cfg.split())
    sizes = {}
    for name, part in zip(("train", "val", "test"), splits):
        part.save(out / f"{name}.json")
        sizes[name] = len(part)
    print(f"enhance: {len(balanced)} balanced tiles "
          f"({balanced.counts[1]}/{balanced.counts[0]}), split "
          f"{sizes['train']}/{sizes['val']}/{sizes['test']} -> {out}")
    return {"manifest": str(out / "manifest.json"),
            "balanced": len(balanced), "splits": sizes}


def _run_train(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    data = _stage_dir(cfg, ns.data, "paths.enhanced", "enhanced")
    train_manifest = DatasetManifest.load(data / "train.json")
    val_manifest = DatasetManifest.load(data / "val.json")
    backbone = resolve_backbone(str(cfg["model.backbone"]),
                                pretrained=bool(cfg["model.pretrained"]))
    classifier = build_classifier(backbone, cfg.classifier())
    trained = train(classifier, train_manifest, val_manifest)
    out = _stage_dir(cfg, ns.out, "paths.model", "model")
    save_model(trained, out)
    last = trained.history[-1]
    print(f"train: {backbone.name}, {len(trained.history)} epochs, "
          f"val accuracy {last['val_accuracy']:.4f} -> {out}")
    return {"model": str(out), "backbone": backbone.name,
            "epochs": len(trained.history),
            "val_accuracy": last["val_accuracy"]}


def _run_evaluate(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    model_dir = _stage_dir(cfg, ns.model_dir, "paths.model", "model")
    trained = load_model(model_dir)
    data = _stage_dir(cfg, ns.data, "paths.enhanced", "enhanced")
    split_name = str(cfg["evaluate.split"])
    manifest = DatasetManifest.load(data / f"{split_name}.json")
    report = evaluate_tiles(trained, manifest,
                            threshold=float(cfg["evaluate.threshold"]))
    out = _stage_dir(cfg, ns.out, "paths.reports", "reports")
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"metrics-{split_name}.json"
    report_path.write_text(
        json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(format_report_table({split_name: report}))
    return {"report": str(report_path), "split": split_name,
            "metrics": report.to_dict()}


def _run_detect(cfg: PipelineConfig, ns: argparse.Namespace) -> dict:
    model_dir = _stage_dir(cfg, ns.model_dir, "paths.model", "model")
    trained = load_model(model_dir)
    if ns.images:
        base = Path(ns.images)
    elif cfg["paths.target"]:
        base = Path(str(cfg["paths.target"]))
    else:
        base = _stage_dir(cfg, None, "paths.source", "source")
    images = load_source_manifest(_manifest_in(base))
    out = _stage_dir(cfg, ns.out, "paths.reports", "detections")
    config = DetectionConfig(
        grid=cfg.grid(), threshold=float(cfg["detect.threshold"]),
        apply_crop=bool(cfg["detect.crop"]),
        canny_low=float(cfg["canny.low"]),
        canny_high=float(cfg["canny.high"]),
        canny_sigma=float(cfg["canny.sigma"]),
    )
    descriptor = f"{trained.backbone.name} @ {model_dir}"
    total = 0
    reports = []
    for image in images:
        result = detect_defects(trained, image, config)
        report_path = write_report(result, out / f"{image.image_id}.jsonl",
                                   model_descriptor=descriptor)
        reports.append(str(report_path))
        if cfg["detect.overlays"]:
            overlay = render_overlay(image.pixels, result)
            save_gray_png(out / f"{image.image_id}-overlay.png", overlay)
        total += len(result.flagged)
        logger.info("%s: %d/%d tiles flagged", image.image_id,
                    len(result.flagged), config.grid.m * config.grid.n)
    print(f"detect: {len(images)} images, {total} tiles flagged -> {out}")
    return {"images": len(images), "flagged": total, "reports": reports}


_STAGE_FUNCS = {
    "synth": _run_synth,
    "preprocess": _run_preprocess,
    "enhance": _run_enhance,
    "train": _run_train,
    "evaluate": _run_evaluate,
    "detect": _run_detect,
}


# ---------------------------------------------------------------------------
# Argument handling.


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 2; we reserve 2 for
    runtime failures, so turn them into validation errors instead."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValidationError(f"grid must look like MxN, got '{text}'")
    try:
        m, n = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ValidationError(f"grid must look like MxN, got '{text}'") from exc
    return m, n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tiledetect",
        description="Grid-tile surface defect detection pipeline.",
        epilog="Any config key can be overridden per run with "
               "--<section>.<key> VALUE (for example --model.epochs 5).",
    )
    sub = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    briefs = {
        "synth": "generate a synthetic annotated image set",
        "preprocess": "crop images and split them into labeled grid tiles",
        "enhance": "balance classes, augment, and split train/val/test",
        "train": "fit the tile classifier",
        "evaluate": "score a labeled split with the trained classifier",
        "detect": "flag defective tiles on target images",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, help=briefs[stage], description=briefs[stage])
        p.add_argument("--config", required=True, metavar="PATH",
                       help="YAML pipeline config")
        p.add_argument("--seed", type=int, metavar="INT",
                       help="override the run seed")
        p.add_argument("--grid", metavar="MxN",
                       help="tile grid, e.g. 10x10")
        p.add_argument("--out", metavar="DIR",
                       help="override this stage's output directory")
        if stage == "preprocess":
            p.add_argument("--source", metavar="PATH",
                           help="source manifest (or its directory)")
        if stage == "enhance":
            p.add_argument("--tiles", metavar="PATH",
                           help="tile manifest (or its directory)")
        if stage in ("train", "evaluate"):
            p.add_argument("--data", metavar="DIR",
                           help="enhanced dataset directory")
        if stage == "train":
            p.add_argument("--backbone", metavar="NAME",
                           help="classifier backbone name")
            p.add_argument("--epochs", type=int, metavar="INT",
                           help="training epochs")
        if stage in ("evaluate", "detect"):
            p.add_argument("--model", dest="model_dir", metavar="DIR",
                           help="trained model directory")
            p.add_argument("--threshold", type=float, metavar="FLOAT",
                           help="decision threshold for this stage")
        if stage == "evaluate":
            p.add_argument("--split", choices=("train", "val", "test"),
                           help="which split to score")
        if stage == "detect":
            p.add_argument("--images", metavar="PATH",
                           help="target image manifest (or its directory)")
        for key in sorted(DEFAULTS):
            if "." in key:
                p.add_argument(f"--{key}", dest=key.replace(".", "__"),
                               metavar="VALUE", help=argparse.SUPPRESS)
    return parser


def _overrides(stage: str, ns: argparse.Namespace) -> dict[str, object]:
    over: dict[str, object] = {}
    for key in DEFAULTS:
        if "." not in key:
            continue
        value = vars(ns).get(key.replace(".", "__"))
        if value is not None:
            over[key] = value
    if ns.seed is not None:
        over["seed"] = ns.seed
    if ns.grid is not None:
        over["grid.m"], over["grid.n"] = _parse_grid(ns.grid)
    threshold = getattr(ns, "threshold", None)
    if threshold is not None:
        over[f"{stage}.threshold"] = threshold
    if getattr(ns, "backbone", None) is not None:
        over["model.backbone"] = ns.backbone
    if getattr(ns, "epochs", None) is not None:
        over["model.epochs"] = ns.epochs
    if getattr(ns, "split", None) is not None:
        over["evaluate.split"] = ns.split
    return over


def _write_run_log(cfg: PipelineConfig, stage: str, started: float,
                   outputs: dict) -> Path:
    log_dir = cfg.workdir() / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "started": datetime.fromtimestamp(
            started, timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": round(time.time() - started, 3),
        "seed": cfg["seed"],
        "config": dict(sorted(cfg.values.items())),
        "outputs": outputs,
    }
    path = log_dir / f"{stage}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        cfg = PipelineConfig.load(ns.config, _overrides(ns.stage, ns))
        workdir = cfg.workdir()
        workdir.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(workdir / ".lock"))
        started = time.time()
        try:
            with lock.acquire(timeout=float(cfg["run.lock_timeout"])):
                outputs = _STAGE_FUNCS[ns.stage](cfg, ns)
        except Timeout as exc:
            raise PipelineError(
                f"working directory {workdir} is locked by another run"
            ) from exc
        _write_run_log(cfg, ns.stage, started, outputs)
        return 0
    except ValidationError as exc:
        logger.error("%s", exc)
        return 1
    except PipelineError as exc:
        logger.error("%s", exc)
        return 2
    except OSError as exc:
        logger.error("%s", exc)
        return 2
    except Exception:  # pragma: no cover - last-resort diagnostics
        logger.exception("unexpected failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
