""" Run configuration: every component's options in one JSON-backed tree.

A run configuration has the sections `sampler`, `model`, `head`, `train` and
  `data`, plus the output directory `out`. Values are resolved in this order, each
  step overriding the previous one:

    1. dataclass defaults
    2. the JSON file passed with --config
    3. dotted flags, e.g. --train.learning_rate 1e-3
    4. the shortcut flags --steps, --seed and --out
"""
import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

import numpy as np

from .backbone import ViTConfig
from .dataio import (
    Dataset,
    SceneSpec,
    SignalSpec,
    Subset,
    generate_scenes,
    generate_signals,
    load_raw_images,
    load_raw_signals,
)
from .definitions import DATASET_FILE, DEFAULT_PAIR_COUNT, _UTF8
from .errors import ConfigurationError
from .geometry import ImageDims, SamplerConfig
from .optim import Schedule
from .relhead import HeadConfig, HeadKind, TargetMode

_FilePath = Union[str, Path]
_Config = TypeVar("_Config")


class TrainMode(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    PROBE = "probe"


class Precision(str, Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"


@dataclass(frozen=True)
class TrainConfig:
    # noinspection PyUnresolvedReferences
    """Optimization and loop options.

    Args:
        learning_rate: Peak learning rate.
        batch_size: Images per step.
        steps: Optimizer steps.
        warmup_steps: Linear warmup steps; None means 5% of `steps`.
        weight_decay: Decoupled weight decay of matrices.
        schedule: Cosine decay after warmup, or constant.
        seed: Seed of initialization, batches and pair subsets.
        mode: Pretraining, finetuning, or linear probing on a frozen trunk.
        target_mode: Translation targets, or translation plus scale ratios.
        pair_count: Pairs predicted per image.
        precision: Storage precision of parameters and activations.
        freeze_pairs: Draw one pair subset per image index instead of per step.
        flip: Random horizontal flips while finetuning (images only).
        workers: Threads assembling batches; 0 assembles them inline.
        prefetch: Batches assembled ahead of the training thread.
        log_interval: Steps between INFO log lines.
        eval_interval: Steps between antisymmetry measurements; 0 disables them.
        eval_images: Validation images per antisymmetry measurement.
        checkpoint_interval: Steps between checkpoints; 0 writes only the final one.
    """
    learning_rate: float = 5e-4
    batch_size: int = 64
    steps: int = 2000
    warmup_steps: Optional[int] = None
    weight_decay: float = 0.05
    schedule: Schedule = Schedule.COSINE
    seed: int = 0
    mode: TrainMode = TrainMode.PRETRAIN
    target_mode: TargetMode = TargetMode.BASE
    pair_count: int = DEFAULT_PAIR_COUNT
    precision: Precision = Precision.FLOAT64
    freeze_pairs: bool = False
    flip: bool = True
    workers: int = 0
    prefetch: int = 2
    log_interval: int = 50
    eval_interval: int = 0
    eval_images: int = 8
    checkpoint_interval: int = 0

    def __post_init__(self) -> None:
        for name, kind in (
            ("schedule", Schedule),
            ("mode", TrainMode),
            ("target_mode", TargetMode),
            ("precision", Precision),
        ):
            try:
                object.__setattr__(self, name, kind(getattr(self, name)))
            except ValueError:
                choices = [choice.value for choice in kind]  # type: ignore
                raise ConfigurationError(
                    f"train.{name} must be one of {choices}. Found: {getattr(self, name)!r}"
                )
        if not self.learning_rate > 0:
            raise ConfigurationError(
                f"train.learning_rate must be positive. Found: {self.learning_rate}"
            )
        if self.steps < 0 or self.batch_size < 1 or self.pair_count < 1:
            raise ConfigurationError(
                "train.steps must be >= 0, train.batch_size and train.pair_count >= 1"
            )
        if self.warmup_steps is not None and not 0 <= self.warmup_steps <= self.steps:
            raise ConfigurationError(
                f"train.warmup_steps must lie in [0, train.steps={self.steps}]. "
                f"Found: {self.warmup_steps}"
            )
        if self.workers < 0 or self.prefetch < 1:
            raise ConfigurationError("train.workers must be >= 0 and train.prefetch >= 1")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(0.05 * self.steps)

    @property
    def dtype(self) -> type:
        return np.float64 if self.precision is Precision.FLOAT64 else np.float32


class DataSource(str, Enum):
    SCENES = "scenes"
    SIGNALS = "signals"
    RAW_IMAGES = "raw_images"
    RAW_SIGNALS = "raw_signals"


@dataclass(frozen=True)
class DataConfig:
    # noinspection PyUnresolvedReferences
    """Where training and validation items come from.

    Args:
        source: Synthetic scenes or signals, or a raw binary file.
        train_count: Training items.
        validation_count: Held-out items (synthetic indices after the training ones,
            or the tail of a raw file).
        scenes: Scene generator options; also the dims of raw image files without a
            dataset.json sidecar.
        signals: Signal generator options; also the length and channels of raw signal
            files without a sidecar.
        path: Raw binary file for the raw sources.
    """
    source: DataSource = DataSource.SCENES
    train_count: int = 512
    validation_count: int = 32
    scenes: SceneSpec = field(default_factory=SceneSpec)
    signals: SignalSpec = field(default_factory=SignalSpec)
    path: Optional[str] = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "source", DataSource(self.source))
        except ValueError:
            raise ConfigurationError(
                f"data.source must be one of {[source.value for source in DataSource]}. "
                f"Found: {self.source!r}"
            )
        if self.train_count < 0 or self.validation_count < 0:
            raise ConfigurationError(
                "data.train_count and data.validation_count must be >= 0"
            )
        raw = self.source in (DataSource.RAW_IMAGES, DataSource.RAW_SIGNALS)
        if raw and not self.path:
            raise ConfigurationError(
                f"data.path is required for data.source={self.source.value}"
            )

    @property
    def dims(self) -> ImageDims:
        """Item dims of the configured source, before any file is read."""
        if self.source in (DataSource.SIGNALS, DataSource.RAW_SIGNALS):
            return self.signals.dims
        return self.scenes.dims


@dataclass(frozen=True)
class RunConfig:
    # noinspection PyUnresolvedReferences
    """The complete, reproducible description of one run.

    Raises:
        ConfigurationError: If the sections disagree with each other.
    """
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/part"

    def __post_init__(self) -> None:
        if self.model.patch_size != self.sampler.patch_size:
            raise ConfigurationError(
                f"model.patch_size={self.model.patch_size} must equal "
                f"sampler.patch_size={self.sampler.patch_size}"
            )
        if self.train.mode is TrainMode.PRETRAIN and self.model.use_positional:
            raise ConfigurationError("model.use_positional must be false for pretraining")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build a configuration from a nested mapping.

        Raises:
            ConfigurationError: If a key is unknown or a value is invalid.
        """
        return _build(cls, data, "")

    @classmethod
    def from_file(
        cls, path: Optional[_FilePath], overrides: Optional[Mapping[str, Any]] = None
    ) -> "RunConfig":
        """Load a JSON file (or start from defaults) and apply dotted overrides."""
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding=_UTF8))
            except json.JSONDecodeError as err:
                raise ConfigurationError(
                    f"Configuration file {path} is not valid JSON: {err}"
                )
            if not isinstance(data, dict):
                raise ConfigurationError(
                    f"Configuration file {path} must hold a JSON object"
                )
        return cls.from_dict(apply_overrides(data, overrides or {}))

    def to_dict(self) -> Dict[str, Any]:
        """The fully materialized configuration as plain JSON values."""
        return _plain(dataclasses.asdict(self))

    def replace(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """A copy with dotted overrides applied."""
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def save(self, path: _FilePath) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding=_UTF8)


def apply_overrides(
    data: Mapping[str, Any], overrides: Mapping[str, Any]
) -> Dict[str, Any]:
    """Set dotted keys (`train.learning_rate`) in a copy of a nested mapping.

    Raises:
        ConfigurationError: If a dotted key runs through a non-section value.
    """
    result: Dict[str, Any] = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        *sections, key = dotted.split(".")
        node = result
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigurationError(
                    f"Configuration key {dotted} is not a section path"
                )
            node = child
        node[key] = value
    return result


def parse_value(text: str) -> Any:
    """Interpret a flag value as JSON when possible (numbers, booleans, null, lists)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_datasets(config: DataConfig) -> Tuple[Dataset, Dataset]:
    """Build the training and validation datasets.

    Raises:
        ConfigurationError: If a raw file holds fewer items than the validation split.
        InvalidDatasetError: If a raw file is malformed.
    """
    if config.source is DataSource.SCENES:
        return (
            generate_scenes(config.scenes, config.train_count),
            generate_scenes(config.scenes, config.validation_count, config.train_count),
        )
    if config.source is DataSource.SIGNALS:
        return (
            generate_signals(config.signals, config.train_count),
            generate_signals(config.signals, config.validation_count, config.train_count),
        )
    path = Path(config.path)  # type: ignore
    sidecar = read_sidecar(path.parent / DATASET_FILE)
    if config.source is DataSource.RAW_IMAGES:
        dims = config.scenes.dims
        if sidecar is not None:
            dims = ImageDims(sidecar["height"], sidecar["width"], sidecar["channels"])
        dataset: Dataset = load_raw_images(path, dims)
    else:
        length, channels = config.signals.length, config.signals.channels
        if sidecar is not None:
            length, channels = sidecar["width"], sidecar["channels"]
        dataset = load_raw_signals(path, length, channels)
    if config.validation_count > len(dataset):
        raise ConfigurationError(
            f"data.validation_count={config.validation_count} exceeds the "
            f"{len(dataset)} items of {path}"
        )
    train_count = min(config.train_count, len(dataset) - config.validation_count)
    validation_start = len(dataset) - config.validation_count
    return (
        Subset(dataset, 0, train_count),
        Subset(dataset, validation_start, config.validation_count),
    )


def read_sidecar(path: Path) -> Optional[Dict[str, Any]]:
    """The dataset.json written next to generated raw files, if there is one."""
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding=_UTF8))


def _build(cls: Type[_Config], data: Mapping[str, Any], prefix: str) -> _Config:
    if not isinstance(data, Mapping):
        section = prefix.rstrip(".") or "<root>"
        raise ConfigurationError(f"Configuration section {section} must be an object")
    fields = {item.name: item for item in dataclasses.fields(cls)}  # type: ignore
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            raise ConfigurationError(f"Unknown configuration key: {path}")
        default = _default(fields[key])
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{path}.")
        elif isinstance(value, list):
            value = _tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        section = prefix.rstrip(".") or "<root>"
        raise ConfigurationError(f"Invalid value in configuration section {section}: {err}")


def _default(item: "dataclasses.Field[Any]") -> Any:
    if item.default_factory is not dataclasses.MISSING:  # type: ignore
        return item.default_factory()  # type: ignore
    return item.default


def _tuple(value: Any) -> Any:
    return tuple(_tuple(item) for item in value) if isinstance(value, list) else value


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def tiny_config(
    kind: Union[HeadKind, str], signal: bool = False, seed: int = 0
) -> RunConfig:
    """The smallest complete run: 8x8 gray scenes (or 16-sample signals), P=4, N=4,
    d=16, depth 2 and 4 pairs, in 64-bit precision. Used for gradient checks.
    """
    data: Dict[str, Any] = {"source": "scenes", "train_count": 2, "validation_count": 1}
    data["scenes"] = {
        "height": 8,
        "width": 8,
        "channels": 1,
        "shape_size": 3,
        "offset_x": 3,
        "offset_y": 2,
        "jitter": 1,
        "seed": seed,
    }
    if signal:
        data["source"] = "signals"
        data["signals"] = {"length": 16, "sample_rate": 8.0, "seed": seed}
    return RunConfig.from_dict(
        {
            "sampler": {"patch_count": 4, "patch_size": 4, "size_min": 3, "size_max": 6},
            "model": {"embed_dim": 16, "depth": 2, "heads": 2, "patch_size": 4},
            "head": {"kind": HeadKind(kind).value},
            "train": {"pair_count": 4, "seed": seed, "precision": "float64"},
            "data": data,
        }
    )
