""" Datasets: synthetic scenes and signals, raw binary files, and image output.

Every synthetic item is a pure function of its generator settings, seed and
  index, so datasets hold no state beyond them and never change after
  construction.

Raw image files are a sequence of records, each one label byte followed by the
  pixels as unsigned bytes in channel-planar order (all of channel 0 row by row,
  then channel 1, ...), the CIFAR binary layout. Raw signal files use the same
  record layout with little-endian float64 samples in place of pixel bytes.
"""
import abc
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .definitions import LABEL_BYTES, STREAM_DATA
from .errors import ConfigurationError, InvalidDatasetError, ShapeError, ZeroVarianceWarning
from .geometry import ImageDims
from .seeding import generator

_FilePath = Union[str, Path]
_Color = Tuple[float, float, float]

DEFAULT_PALETTE: Tuple[_Color, ...] = (
    (0.1, 0.1, 0.15),
    (0.9, 0.3, 0.2),
    (0.2, 0.6, 0.9),
    (0.95, 0.85, 0.3),
)


@dataclass(frozen=True)
class Sample:
    """One dataset item: an (H, W, C) array (height 1 for signals) and its label."""

    data: np.ndarray
    label: Optional[int] = None


class Dataset(abc.ABC):
    """Indexable collection of images or signals with constant dims."""

    dims: ImageDims
    num_classes: int = 0

    @abc.abstractmethod
    def __len__(self) -> int:
        ...

    @abc.abstractmethod
    def __getitem__(self, index: int) -> Sample:
        ...

    @property
    def is_signal(self) -> bool:
        return self.dims.height == 1

    @property
    def labeled(self) -> bool:
        return self.num_classes > 0

    def labels(self) -> np.ndarray:
        return np.array([self[index].label for index in range(len(self))], dtype=np.int64)

    def _check_index(self, index: int) -> None:
        if not 0 <= index < len(self):
            raise IndexError(f"Index {index} is out of range for {len(self)} items")


class SceneKind(str, Enum):
    GRADIENT = "gradient"
    TWO_SHAPE = "two_shape"
    STRIPES = "stripes"


@dataclass(frozen=True)
class SceneSpec:
    # noinspection PyUnresolvedReferences
    """Synthetic 2D scenes with a globally consistent structure.

    Args:
        height: Canvas height in pixels.
        width: Canvas width in pixels.
        channels: 1 (gray) or 3 (RGB).
        kind: Vertical gradient, two shapes at a fixed offset, or a striped field.
        shape_size: Side of each square in two-shape scenes.
        offset_x: Column offset of shape B from shape A.
        offset_y: Row offset of shape B from shape A.
        jitter: Largest per-image deviation from the offset, per axis.
        palette: Background, first and second colors.
        labeled: Attach a balanced binary label that decides the arrangement
            (mirrored offset, gradient direction or stripe orientation).
        seed: Generation seed.
    """
    height: int = 32
    width: int = 32
    channels: int = 3
    kind: SceneKind = SceneKind.TWO_SHAPE
    shape_size: int = 8
    offset_x: int = 12
    offset_y: int = 6
    jitter: int = 2
    palette: Tuple[_Color, ...] = DEFAULT_PALETTE
    labeled: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SceneKind(self.kind))
        object.__setattr__(self, "palette", tuple(tuple(color) for color in self.palette))
        ImageDims(self.height, self.width, self.channels)
        if self.channels not in (1, 3):
            raise ConfigurationError(
                f"data.scenes.channels must be 1 or 3. Found: {self.channels}"
            )
        if len(self.palette) < 3:
            raise ConfigurationError("data.scenes.palette needs at least three colors")
        if self.kind is SceneKind.TWO_SHAPE:
            span_x = abs(self.offset_x) + self.jitter + self.shape_size
            span_y = abs(self.offset_y) + self.jitter + self.shape_size
            if self.shape_size < 1 or span_x > self.width or span_y > self.height:
                raise ConfigurationError(
                    f"Two shapes of size {self.shape_size} at offset "
                    f"({self.offset_x}, {self.offset_y}) +- {self.jitter} do not fit a "
                    f"{self.height}x{self.width} canvas"
                )

    @property
    def dims(self) -> ImageDims:
        return ImageDims(self.height, self.width, self.channels)


class SceneDataset(Dataset):
    """`count` scenes with indices `start, start + 1, ...`; ranges that do not overlap
    share no scene.
    """

    def __init__(self, spec: SceneSpec, count: int, start: int = 0):
        self.spec = spec
        self.count = count
        self.start = start
        self.dims = spec.dims
        self.num_classes = 2 if spec.labeled else 0

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> Sample:
        self._check_index(index)
        return generate_scene(self.spec, self.start + index)


def generate_scenes(spec: SceneSpec, count: int, start: int = 0) -> SceneDataset:
    """Dataset of `count` synthetic scenes.

    Raises:
        ConfigurationError: If the count is negative.
    """
    if count < 0:
        raise ConfigurationError(f"Scene count must be non-negative. Found: {count}")
    return SceneDataset(spec, count, start)


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Render scene `index` under these settings; values lie in [0, 1]."""
    rng = generator(spec.seed, STREAM_DATA, index)
    label = index % 2
    colors = [_color(spec, color) for color in spec.palette]
    if spec.kind is SceneKind.GRADIENT:
        image = _gradient(spec, rng, colors, label)
    elif spec.kind is SceneKind.STRIPES:
        image = _stripes(spec, rng, colors, label)
    else:
        image = _two_shapes(spec, rng, colors, label)
    return Sample(np.clip(image, 0.0, 1.0), label if spec.labeled else None)


def _color(spec: SceneSpec, color: Sequence[float]) -> np.ndarray:
    rgb = np.asarray(color, dtype=np.float64)
    return rgb if spec.channels == 3 else rgb.mean(keepdims=True)


def _gradient(
    spec: SceneSpec, rng: np.random.Generator, colors: List[np.ndarray], label: int
) -> np.ndarray:
    low, high = rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)
    ramp = np.linspace(low, high, spec.height)
    if spec.labeled and label:
        ramp = ramp[::-1]
    tint = rng.uniform(0.5, 1.0, size=spec.channels)
    return np.broadcast_to(ramp[:, None, None] * tint, spec.dims.shape).copy()


def _stripes(
    spec: SceneSpec, rng: np.random.Generator, colors: List[np.ndarray], label: int
) -> np.ndarray:
    period = int(rng.choice([4, 8]))
    phase = int(rng.integers(0, period))
    axis = spec.height if spec.labeled and label else spec.width
    band = ((np.arange(axis) + phase) // (period // 2)) % 2
    if spec.labeled and label:
        band = np.broadcast_to(band[:, None], (spec.height, spec.width))
    else:
        band = np.broadcast_to(band[None, :], (spec.height, spec.width))
    return np.where(band[..., None] == 0, colors[1], colors[2])


def _two_shapes(
    spec: SceneSpec, rng: np.random.Generator, colors: List[np.ndarray], label: int
) -> np.ndarray:
    size = spec.shape_size
    offset_x = -spec.offset_x if spec.labeled and label else spec.offset_x
    shift_x = offset_x + int(rng.integers(-spec.jitter, spec.jitter + 1))
    shift_y = spec.offset_y + int(rng.integers(-spec.jitter, spec.jitter + 1))
    a_x = int(rng.integers(max(0, -shift_x), spec.width - size - max(0, shift_x) + 1))
    a_y = int(rng.integers(max(0, -shift_y), spec.height - size - max(0, shift_y) + 1))
    image = np.broadcast_to(colors[0], spec.dims.shape).copy()
    image[a_y : a_y + size, a_x : a_x + size] = colors[1]
    b_x, b_y = a_x + shift_x, a_y + shift_y
    image[b_y : b_y + size, b_x : b_x + size] = colors[2]
    return image


@dataclass(frozen=True)
class SignalSpec:
    # noinspection PyUnresolvedReferences
    """Synthetic multi-component sinusoid recordings with stage-like labels.

    Args:
        length: Samples per recording.
        sample_rate: Samples per second.
        channels: Independent channels per recording.
        frequencies: Component frequencies in Hz.
        amplitudes: Component amplitudes, aligned with `frequencies`.
        phase_drift: Largest random drift of each component phase, radians per second.
        noise: Standard deviation of additive Gaussian noise.
        emphasis: Amplitude multiplier of the component that defines the label.
        labeled: Attach labels; recording `i` emphasizes component `i % K`.
        normalize: Instance-normalize each recording.
        seed: Generation seed.
    """
    length: int = 3000
    sample_rate: float = 100.0
    channels: int = 1
    frequencies: Tuple[float, ...] = (1.0, 3.0, 7.0, 12.0, 20.0)
    amplitudes: Tuple[float, ...] = (1.0, 0.8, 0.6, 0.5, 0.4)
    phase_drift: float = 0.2
    noise: float = 0.1
    emphasis: float = 3.0
    labeled: bool = False
    normalize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frequencies", tuple(self.frequencies))
        object.__setattr__(self, "amplitudes", tuple(self.amplitudes))
        if self.length < 2 or self.channels < 1 or self.sample_rate <= 0:
            raise ConfigurationError(
                "data.signals needs length >= 2, channels >= 1 and sample_rate > 0"
            )
        if not self.frequencies or len(self.frequencies) != len(self.amplitudes):
            raise ConfigurationError(
                "data.signals.frequencies and data.signals.amplitudes must align"
            )

    @property
    def dims(self) -> ImageDims:
        return ImageDims(1, self.length, self.channels)


class SignalDataset(Dataset):
    def __init__(self, spec: SignalSpec, count: int, start: int = 0):
        self.spec = spec
        self.count = count
        self.start = start
        self.dims = spec.dims
        self.num_classes = len(spec.frequencies) if spec.labeled else 0

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> Sample:
        self._check_index(index)
        return generate_signal(self.spec, self.start + index)


def generate_signals(spec: SignalSpec, count: int, start: int = 0) -> SignalDataset:
    if count < 0:
        raise ConfigurationError(f"Signal count must be non-negative. Found: {count}")
    return SignalDataset(spec, count, start)


def generate_signal(spec: SignalSpec, index: int) -> Sample:
    """Render recording `index` as an array of shape (1, length, channels)."""
    rng = generator(spec.seed, STREAM_DATA, index)
    stages = len(spec.frequencies)
    label = index % stages
    time = np.arange(spec.length) / spec.sample_rate
    signal = np.zeros((spec.length, spec.channels))
    components = zip(spec.frequencies, spec.amplitudes)
    for component, (frequency, amplitude) in enumerate(components):
        if spec.labeled and component == label:
            amplitude *= spec.emphasis
        phase = rng.uniform(0, 2 * np.pi, size=spec.channels)
        drift = rng.uniform(-spec.phase_drift, spec.phase_drift, size=spec.channels)
        angle = 2 * np.pi * frequency * time[:, None] + phase + drift * time[:, None]
        signal += amplitude * np.sin(angle)
    signal += spec.noise * rng.standard_normal(signal.shape)
    if spec.normalize:
        signal, _ = instance_normalize(signal)
    return Sample(signal[None, :, :], label if spec.labeled else None)


def instance_normalize(window: np.ndarray, warn: bool = True) -> Tuple[np.ndarray, bool]:
    """Shift every channel of a window to zero mean and scale it to unit variance.

    Args:
        window: Array of shape (L,) or (L, C).
        warn: Whether to emit a ZeroVarianceWarning for constant channels.

    Returns:
        The normalized window and a flag that is True when a channel had zero
          variance (such channels are returned as zeros).

    Raises:
        ShapeError: If the window has fewer than two samples.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape[0] < 2:
        raise ShapeError(
            f"Instance normalization needs at least two samples. Found: {window.shape}"
        )
    centered = window - window.mean(axis=0)
    spread = centered.std(axis=0)
    magnitude = np.maximum(1.0, np.abs(window).max(axis=0))
    degenerate = spread <= np.finfo(np.float64).eps * magnitude
    safe = np.where(degenerate, 1.0, spread)
    normalized = np.where(degenerate, 0.0, centered / safe)
    flagged = bool(np.any(degenerate))
    if flagged and warn:
        warnings.warn(
            "A window with zero variance was normalized to zeros.", ZeroVarianceWarning
        )
    return normalized, flagged


class ArrayDataset(Dataset):
    """Items held in memory, e.g. read from a raw binary file."""

    def __init__(self, data: np.ndarray, labels: Optional[np.ndarray] = None):
        if data.ndim != 4:
            raise ShapeError(f"Expected items of shape (M, H, W, C). Found: {data.shape}")
        self.data = data
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.dims = ImageDims(*(max(1, size) for size in data.shape[1:]))
        self.num_classes = 0
        if self._labels is not None and len(self._labels):
            self.num_classes = int(self._labels.max()) + 1

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, index: int) -> Sample:
        self._check_index(index)
        label = None if self._labels is None else int(self._labels[index])
        return Sample(self.data[index], label)


class Subset(Dataset):
    """A contiguous slice `[start, start + count)` of another dataset."""

    def __init__(self, dataset: Dataset, start: int, count: int):
        if start < 0 or start + count > len(dataset):
            raise ConfigurationError(
                f"Cannot take {count} items from index {start} of a "
                f"{len(dataset)}-item dataset"
            )
        self.dataset = dataset
        self.start = start
        self.count = count
        self.dims = dataset.dims
        self.num_classes = dataset.num_classes

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> Sample:
        self._check_index(index)
        return self.dataset[self.start + index]


def load_raw_images(path: _FilePath, dims: ImageDims) -> ArrayDataset:
    """Read a raw image file (label byte + channel-planar u8 pixels per record).

    Raises:
        InvalidDatasetError: If the file length is not a whole number of records.
    """
    raw = Path(path).read_bytes()
    pixels = dims.height * dims.width * dims.channels
    record = LABEL_BYTES + pixels
    if len(raw) % record:
        raise InvalidDatasetError(
            f"File {path} holds {len(raw)} bytes, not a multiple of the {record}-byte "
            f"record for {dims.height}x{dims.width}x{dims.channels} images"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    planes = records[:, LABEL_BYTES:].reshape(-1, dims.channels, dims.height, dims.width)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return ArrayDataset(images.reshape(-1, *dims.shape), records[:, 0].astype(np.int64))


def write_raw_images(path: _FilePath, dataset: Dataset) -> None:
    """Write every item of an image dataset in the raw image layout."""
    with Path(path).open("wb") as f:
        for index in range(len(dataset)):
            sample = dataset[index]
            pixels = np.rint(np.clip(sample.data, 0.0, 1.0) * 255).astype(np.uint8)
            f.write(bytes([sample.label or 0]))
            f.write(pixels.transpose(2, 0, 1).tobytes())


def load_raw_signals(path: _FilePath, length: int, channels: int) -> ArrayDataset:
    """Read a raw signal file (label byte + channel-planar little-endian float64).

    Raises:
        InvalidDatasetError: If the file length is not a whole number of records.
    """
    raw = Path(path).read_bytes()
    record = LABEL_BYTES + 8 * length * channels
    if len(raw) % record:
        raise InvalidDatasetError(
            f"File {path} holds {len(raw)} bytes, not a multiple of the {record}-byte "
            f"record for {channels}-channel signals of {length} samples"
        )
    count = len(raw) // record
    labels = np.empty(count, dtype=np.int64)
    signals = np.empty((count, 1, length, channels))
    for index in range(count):
        chunk = raw[index * record : (index + 1) * record]
        labels[index] = chunk[0]
        planes = np.frombuffer(chunk[LABEL_BYTES:], dtype="<f8").reshape(channels, length)
        signals[index, 0] = planes.T
    return ArrayDataset(signals, labels)


def write_raw_signals(path: _FilePath, dataset: Dataset) -> None:
    with Path(path).open("wb") as f:
        for index in range(len(dataset)):
            sample = dataset[index]
            f.write(bytes([sample.label or 0]))
            f.write(np.ascontiguousarray(sample.data[0].T).astype("<f8").tobytes())


def write_pnm(path: _FilePath, image: np.ndarray) -> None:
    """Write an (H, W, C) image in [0, 1] as binary PGM (C = 1) or PPM (C = 3)."""
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] not in (1, 3):
        raise ShapeError(f"PNM output needs 1 or 3 channels. Found: {image.shape[2]}")
    magic = "P5" if image.shape[2] == 1 else "P6"
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"{magic}\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pnm(path: _FilePath) -> np.ndarray:
    """Read a binary PGM/PPM written by `write_pnm` into an (H, W, C) array in [0, 1]."""
    raw = Path(path).read_bytes()
    magic, size, depth, pixels = raw.split(b"\n", 3)
    width, height = (int(value) for value in size.split())
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, channels)
    return data.astype(np.float64) / int(depth)
