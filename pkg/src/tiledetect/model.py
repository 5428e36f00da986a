"""Binary tile classifier: rescale -> backbone -> pooling -> dropout -> sigmoid.

The backbone is pluggable. Three ImageNet-era architectures are registered
by depth class next to a small "tiny" convolutional net that trains from
random initialization in seconds on a CPU, so the full pipeline runs with no
external weight downloads. Training minimizes binary cross-entropy
end-to-end; inference returns one defect probability per tile.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .core import DatasetManifest, PipelineError, ValidationError, load_gray_png

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "tile-classifier/1"
WEIGHTS_FILE = "model.weights.h5"
DESCRIPTOR_FILE = "descriptor.json"

_tf = None
_keras = None


def _backend():
    """Import TensorFlow lazily so the light modules stay import-fast."""
    global _tf, _keras
    if _tf is None:
        import keras
        import tensorflow as tf
        tf.config.experimental.enable_op_determinism()
        _tf, _keras = tf, keras
    return _tf, _keras


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    depth_class: str      # approximate layer-count tag
    input_size: int       # square input resolution
    channels: int
    pretrained: bool = False


# Depth classes follow the usual layer-count buckets for these families.
_REGISTRY: dict[str, dict] = {
    "tiny": {"depth_class": "desk-scale", "input_size": 32, "channels": 1},
    "xception-class": {"depth_class": "~100", "input_size": 299, "channels": 3},
    "resnet101v2-class": {"depth_class": "~200", "input_size": 224, "channels": 3},
    "inceptionresnetv2-class": {"depth_class": "~400", "input_size": 299,
                                "channels": 3},
}


def backbone_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def resolve_backbone(name: str, input_size: int | None = None,
                     pretrained: bool = False) -> BackboneSpec:
    if name not in _REGISTRY:
        raise ValidationError(
            f"unknown backbone '{name}'; available: {', '.join(_REGISTRY)}"
        )
    entry = _REGISTRY[name]
    return BackboneSpec(name=name, depth_class=entry["depth_class"],
                        input_size=input_size or entry["input_size"],
                        channels=entry["channels"], pretrained=pretrained)


@dataclass(frozen=True)
class ClassifierConfig:
    dropout: float = 0.2
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    freeze_epochs: int = 0  # optional warm-up with the backbone frozen

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must be in [0,1), got {self.dropout}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, "
                                  f"got {self.learning_rate}")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ValidationError("freeze_epochs must be between 0 and epochs")


def rescale_pixels(raster: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities [0,255] to [-1,1] via v/127.5 - 1."""
    arr = np.asarray(raster, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValidationError("pixel intensities must lie in [0,255]")
    return arr / 127.5 - 1.0


def prepare_batch(tiles: Sequence[np.ndarray], input_size: int,
                  channels: int) -> np.ndarray:
    """Resize raw uint8 tiles to the backbone input, replicating channels.

    Output stays in [0,255]; the in-model rescaling layer does the [-1,1]
    normalization.
    """
    if len(tiles) == 0:
        raise ValidationError("empty tile batch")
    out = np.empty((len(tiles), input_size, input_size, channels),
                   dtype=np.float32)
    for i, tile in enumerate(tiles):
        arr = np.asarray(tile, dtype=np.uint8)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"tile {i}: expected a non-empty 2-D raster, "
                                  f"got shape {arr.shape}")
        if arr.shape != (input_size, input_size):
            arr = cv2.resize(arr, (input_size, input_size),
                             interpolation=cv2.INTER_LINEAR)
        out[i] = arr[..., None].astype(np.float32).repeat(channels, axis=-1)
    return out


def _build_backbone(spec: BackboneSpec, keras, seed: int):
    shape = (spec.input_size, spec.input_size, spec.channels)
    weights = "imagenet" if spec.pretrained else None
    if spec.name == "tiny":
        init = keras.initializers.GlorotUniform
        inputs = keras.Input(shape=shape, name="tiny_in")
        x = keras.layers.Conv2D(16, 3, strides=2, padding="same",
                                activation="relu",
                                kernel_initializer=init(seed=seed + 1))(inputs)
        x = keras.layers.Conv2D(32, 3, strides=2, padding="same",
                                activation="relu",
                                kernel_initializer=init(seed=seed + 2))(x)
        x = keras.layers.Conv2D(32, 3, strides=1, padding="same",
                                activation="relu",
                                kernel_initializer=init(seed=seed + 3))(x)
        return keras.Model(inputs, x, name="tiny")
    try:
        if spec.name == "xception-class":
            return keras.applications.Xception(
                weights=weights, include_top=False, input_shape=shape)
        if spec.name == "resnet101v2-class":
            return keras.applications.ResNet101V2(
                weights=weights, include_top=False, input_shape=shape)
        if spec.name == "inceptionresnetv2-class":
            return keras.applications.InceptionResNetV2(
                weights=weights, include_top=False, input_shape=shape)
    except Exception as exc:
        raise PipelineError(
            f"could not build backbone '{spec.name}' "
            f"(pretrained={spec.pretrained}): {exc}"
        ) from exc
    raise ValidationError(f"unknown backbone '{spec.name}'")


@dataclass
class TrainedModel:
    """Backbone spec + head parameters + training history.

    Immutable for inference purposes once training finishes: prediction is
    deterministic (dropout off) and safe to call concurrently.
    """

    backbone: BackboneSpec
    config: ClassifierConfig
    net: "object"  # keras.Model
    history: list[dict] = field(default_factory=list)

    def predict_batch(self, tiles: Sequence[np.ndarray],
                      chunk: int = 512) -> np.ndarray:
        """Defect probability in [0,1] for each raw uint8 tile."""
        x = prepare_batch(tiles, self.backbone.input_size,
                          self.backbone.channels)
        probs = np.empty(len(tiles), dtype=np.float64)
        for start in range(0, len(tiles), chunk):
            part = x[start:start + chunk]
            out = self.net(part, training=False)
            probs[start:start + len(part)] = np.asarray(out).reshape(-1)
        return probs

    def predict_tile(self, tile: np.ndarray) -> float:
        return float(self.predict_batch([tile])[0])

    @property
    def head(self):
        return self.net.get_layer("head")


def build_classifier(backbone: BackboneSpec | str,
                     config: ClassifierConfig | None = None,
                     dtype: str = "float32") -> TrainedModel:
    """Assemble the untrained classifier network.

    Layout: input -> rescale to [-1,1] -> backbone feature maps -> global
    average pooling -> dropout (training only) -> one sigmoid unit. The head
    kernel uses a seeded initializer and the bias starts at zero.
    """
    if isinstance(backbone, str):
        backbone = resolve_backbone(backbone)
    config = config or ClassifierConfig()
    _, keras = _backend()

    # set_floatx alone is not enough: the global dtype policy is cached on
    # first layer use and must be swapped explicitly.
    previous = keras.config.dtype_policy()
    keras.config.set_dtype_policy(dtype)
    try:
        shape = (backbone.input_size, backbone.input_size, backbone.channels)
        inputs = keras.Input(shape=shape, name="tile")
        x = keras.layers.Rescaling(scale=1 / 127.5, offset=-1.0,
                                   name="rescale")(inputs)
        x = _build_backbone(backbone, keras, config.seed)(x)
        x = keras.layers.GlobalAveragePooling2D(name="gap")(x)
        x = keras.layers.Dropout(config.dropout, seed=config.seed,
                                 name="dropout")(x)
        outputs = keras.layers.Dense(
            1, activation="sigmoid", name="head",
            kernel_initializer=keras.initializers.GlorotUniform(seed=config.seed),
            bias_initializer="zeros")(x)
        net = keras.Model(inputs, outputs, name=f"classifier_{backbone.name}")
    finally:
        keras.config.set_dtype_policy(previous)
    return TrainedModel(backbone=backbone, config=config, net=net)


def manifest_arrays(manifest: DatasetManifest, input_size: int,
                    channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Load every tile in a manifest as a model-ready batch plus labels."""
    if len(manifest) == 0:
        raise ValidationError("empty tile manifest")
    tiles = [load_gray_png(manifest.resolve(e)) for e in manifest.entries]
    labels = np.array([e.label for e in manifest.entries], dtype=np.float32)
    return prepare_batch(tiles, input_size, channels), labels


class _AbortOnNonFinite:
    """Raises on the first non-finite training loss, with a diagnostic."""

    def __new__(cls):
        _, keras = _backend()

        class Impl(keras.callbacks.Callback):
            def on_epoch_end(self, epoch, logs=None):
                loss = (logs or {}).get("loss")
                if loss is None or not np.isfinite(loss):
                    raise PipelineError(
                        f"training aborted: non-finite loss {loss!r} "
                        f"at epoch {epoch + 1}"
                    )

        return Impl()


def train(model: TrainedModel, train_manifest: DatasetManifest,
          val_manifest: DatasetManifest,
          config: ClassifierConfig | None = None) -> TrainedModel:
    """Fit the classifier end-to-end and record per-epoch metrics.

    Shuffled mini-batches, binary cross-entropy, adaptive first-order
    optimizer. With ``freeze_epochs`` > 0 the backbone stays frozen for that
    many warm-up epochs before the whole network trains.
    """
    config = config or model.config
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise ValidationError("train and validation manifests must be non-empty")
    tf, keras = _backend()

    size, ch = model.backbone.input_size, model.backbone.channels
    x_train, y_train = manifest_arrays(train_manifest, size, ch)
    x_val, y_val = manifest_arrays(val_manifest, size, ch)
    for name, y in (("train", y_train), ("val", y_val)):
        bad = set(np.unique(y)) - {0.0, 1.0}
        if bad:
            raise ValidationError(f"{name} labels outside {{0,1}}: {bad}")

    keras.utils.set_random_seed(config.seed)
    backbone_net = model.net.layers[2]  # input, rescale, backbone, ...

    def compile_and_fit(epochs: int) -> dict:
        model.net.compile(
            optimizer=keras.optimizers.Adam(config.learning_rate),
            loss=keras.losses.BinaryCrossentropy(),
            metrics=["accuracy"],
        )
        h = model.net.fit(
            x_train, y_train, validation_data=(x_val, y_val),
            epochs=epochs, batch_size=config.batch_size, shuffle=True,
            verbose=0, callbacks=[_AbortOnNonFinite()],
        )
        return h.history

    history: list[dict] = []

    def extend(hist: dict) -> None:
        for i in range(len(hist["loss"])):
            history.append({
                "epoch": len(history) + 1,
                "loss": float(hist["loss"][i]),
                "accuracy": float(hist["accuracy"][i]),
                "val_loss": float(hist["val_loss"][i]),
                "val_accuracy": float(hist["val_accuracy"][i]),
            })

    if config.freeze_epochs > 0:
        backbone_net.trainable = False
        extend(compile_and_fit(config.freeze_epochs))
        backbone_net.trainable = True
    remaining = config.epochs - config.freeze_epochs
    if remaining > 0:
        extend(compile_and_fit(remaining))

    model.history = history
    model.config = config
    logger.info("trained %s for %d epochs: final loss %.4f, val accuracy %.4f",
                model.backbone.name, len(history),
                history[-1]["loss"], history[-1]["val_accuracy"])
    return model


def _bce(tf, y: np.ndarray, p):
    """Mean binary cross-entropy in the dtype of the predictions.

    The stock loss object computes in global floatx (float32), which is too
    coarse for finite-difference comparisons on a float64 network.
    """
    p = tf.convert_to_tensor(p)
    y = tf.cast(tf.reshape(y, [-1, 1]), p.dtype)
    eps = tf.constant(1e-12, dtype=p.dtype)
    p = tf.clip_by_value(p, eps, 1 - eps)
    return -tf.reduce_mean(y * tf.math.log(p) + (1 - y) * tf.math.log(1 - p))


def loss_on_batch(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of the model on a prepared batch."""
    tf, _ = _backend()
    return float(_bce(tf, y, model.net(x, training=False)))


def head_gradients(model: TrainedModel, x: np.ndarray,
                   y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic loss gradients with respect to the head kernel and bias."""
    tf, _ = _backend()
    with tf.GradientTape() as tape:
        loss = _bce(tf, y, model.net(x, training=False))
    gk, gb = tape.gradient(loss, [model.head.kernel, model.head.bias])
    return np.asarray(gk), np.asarray(gb)


def save_model(model: TrainedModel, out_dir: str | Path) -> Path:
    """Persist weights plus a descriptor with backbone, config, and history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.net.save_weights(out_dir / WEIGHTS_FILE)
    descriptor = {
        "schema": MODEL_SCHEMA,
        "backbone": asdict(model.backbone),
        "config": asdict(model.config),
        "history": model.history,
    }
    (out_dir / DESCRIPTOR_FILE).write_text(
        json.dumps(descriptor, indent=1, sort_keys=True) + "\n")
    return out_dir


def load_model(model_dir: str | Path) -> TrainedModel:
    """Rebuild the network from its descriptor and restore the weights."""
    model_dir = Path(model_dir)
    desc_path = model_dir / DESCRIPTOR_FILE
    weights_path = model_dir / WEIGHTS_FILE
    if not desc_path.is_file() or not weights_path.is_file():
        raise ValidationError(f"no saved model in {model_dir} "
                              f"(need {DESCRIPTOR_FILE} and {WEIGHTS_FILE})")
    try:
        descriptor = json.loads(desc_path.read_text())
        backbone = BackboneSpec(**descriptor["backbone"])
        config = ClassifierConfig(**descriptor["config"])
        history = descriptor.get("history", [])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"corrupt model descriptor {desc_path}: {exc}") from exc
    model = build_classifier(backbone, config)
    try:
        model.net.load_weights(weights_path)
    except Exception as exc:
        raise ValidationError(f"corrupt model weights {weights_path}: {exc}") from exc
    model.history = history
    return model
