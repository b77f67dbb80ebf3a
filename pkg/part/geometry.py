""" Patch boxes, samplers and pairwise relative translation targets.

Coordinates follow the image array convention: `x` is the column index, `y` is
  the row index, and the origin is the top left pixel. A box covers the pixels
  `[x_s, x_s + width) x [y_s, y_s + height)`.
"""
import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .definitions import BOXES_HEADER, DEFAULT_PATCH_SIZE
from .errors import ConfigurationError, DegenerateBoxError, GeometryError

_FilePath = Union[str, Path]


@dataclass(frozen=True)
class ImageDims:
    """Height, width and channel count of an image (or of a 1D signal, with height 1)."""

    height: int
    width: int
    channels: int = 1

    def __post_init__(self) -> None:
        for name in ("height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    f"Image {name} must be at least 1. Found: {getattr(self, name)}"
                )

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels


@dataclass(frozen=True)
class PatchBox:
    # noinspection PyUnresolvedReferences
    """Axis-aligned sampling rectangle in image pixel coordinates.

    Args:
        x_s: Column of the top left corner.
        y_s: Row of the top left corner.
        width: Width of the box in pixels.
        height: Height of the box in pixels.
    """
    x_s: int
    y_s: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise DegenerateBoxError(
                f"Patch boxes must be at least one pixel wide and high. "
                f"Found: {self.width}x{self.height}"
            )
        if self.x_s < 0 or self.y_s < 0:
            raise GeometryError(
                f"Patch boxes must start inside the image. Found: ({self.x_s}, {self.y_s})"
            )

    @property
    def x_e(self) -> int:
        return self.x_s + self.width

    @property
    def y_e(self) -> int:
        return self.y_s + self.height

    @property
    def center(self) -> Tuple[float, float]:
        return self.x_s + self.width / 2, self.y_s + self.height / 2

    def fits(self, dims: ImageDims) -> bool:
        """Whether the box lies entirely inside an image of the given dims."""
        return self.x_e <= dims.width and self.y_e <= dims.height


@dataclass(frozen=True)
class RelativeTarget:
    """Translation of a target box expressed in units of the reference box size."""

    dx: float
    dy: float


@dataclass(frozen=True)
class ExtendedTarget:
    """Translation plus width and height ratios of a target box to its reference."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        if not (self.dw > 0 and self.dh > 0):
            raise DegenerateBoxError(
                f"Scale ratios must be positive. Found: dw={self.dw}, dh={self.dh}"
            )


class SamplingMode(str, Enum):
    OFFGRID = "offgrid"
    GRID = "grid"


@dataclass(frozen=True)
class SamplerConfig:
    # noinspection PyUnresolvedReferences
    """How patch boxes are drawn from an image.

    Args:
        patch_count: Number of boxes N. Defaults to H*W/P^2 for the image at hand.
        patch_size: Side P every box is resized to before embedding.
        size_min: Smallest box side D. Defaults to `patch_size`.
        size_max: Largest box side D. Defaults to `patch_size`.
        mode: Off-grid random boxes or a fixed tiling.
        seed: Seed for samplers driven outside of training (diagnostics, CLI).
        anisotropic: Draw width and height independently (corner-based sampling).
    """
    patch_count: Optional[int] = None
    patch_size: int = DEFAULT_PATCH_SIZE
    size_min: Optional[int] = None
    size_max: Optional[int] = None
    mode: SamplingMode = SamplingMode.OFFGRID
    seed: int = 0
    anisotropic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SamplingMode(self.mode))
        if self.patch_count is not None and self.patch_count < 2:
            raise ConfigurationError(
                f"sampler.patch_count must be at least 2. Found: {self.patch_count}"
            )
        if self.patch_size < 1:
            raise ConfigurationError(
                f"sampler.patch_size must be at least 1. Found: {self.patch_size}"
            )
        low, high = self.size_range
        if not 1 <= low <= high:
            raise ConfigurationError(
                f"sampler.size_min and sampler.size_max must satisfy "
                f"1 <= size_min <= size_max. Found: {low}, {high}"
            )

    @property
    def size_range(self) -> Tuple[int, int]:
        low = self.patch_size if self.size_min is None else self.size_min
        high = self.patch_size if self.size_max is None else self.size_max
        return low, high

    def count_for(self, dims: ImageDims) -> int:
        """Number of patches drawn from an image of the given dims.

        Without an explicit count this is H*W/P^2 for images and L/P for 1D
          signals (dims of height 1).
        """
        if self.patch_count is not None:
            return self.patch_count
        if dims.height == 1:
            return max(2, dims.width // self.patch_size)
        return max(2, (dims.height * dims.width) // (self.patch_size**2))

    def check(self, dims: ImageDims) -> None:
        """Validate the parts of the configuration that depend on the image dims.

        Raises:
            ConfigurationError: If boxes cannot be drawn from an image of these dims.
        """
        low, high = self.size_range
        if self.mode is SamplingMode.GRID:
            _check_divisible(dims, self.patch_size)
            expected = (dims.height * dims.width) // (self.patch_size**2)
            if self.patch_count is not None and self.patch_count != expected:
                raise ConfigurationError(
                    f"sampler.patch_count must equal H*W/P^2 = {expected} in grid mode. "
                    f"Found: {self.patch_count}"
                )
        elif low > min(dims.height, dims.width):
            raise ConfigurationError(
                f"sampler.size_min={low} does not fit an image of "
                f"{dims.height}x{dims.width} pixels"
            )
        elif high > min(dims.height, dims.width):
            raise ConfigurationError(
                f"sampler.size_max={high} exceeds min(H, W)={min(dims.height, dims.width)}"
            )


@dataclass(frozen=True)
class PairSelection:
    # noinspection PyUnresolvedReferences
    """Ordered (reference, target) index pairs the relative head predicts on.

    Args:
        pairs: Integer array of shape (count, 2); column 0 holds reference indices
            and column 1 holds target indices.
    """
    pairs: np.ndarray

    def __post_init__(self) -> None:
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise GeometryError(f"Pairs must have shape (count, 2). Found: {pairs.shape}")
        if np.any(pairs < 0):
            raise GeometryError("Pair indices must be non-negative.")
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise GeometryError(
                "A pair may not use the same patch as reference and target."
            )
        object.__setattr__(self, "pairs", pairs)

    @property
    def count(self) -> int:
        return int(self.pairs.shape[0])

    def check(self, patch_count: int) -> None:
        """Raise a GeometryError if any index is outside `[0, patch_count)`."""
        if self.count and int(self.pairs.max()) >= patch_count:
            raise GeometryError(
                f"Pair index {int(self.pairs.max())} is out of range for "
                f"{patch_count} patches"
            )


def sample_offgrid(
    dims: ImageDims, config: SamplerConfig, rng: np.random.Generator
) -> List[PatchBox]:
    """Draw N random boxes anywhere inside the image.

    Each box side D is uniform over `[size_min, size_max]` (independently per axis
      when `config.anisotropic`) and the top left corner is uniform over every
      position that keeps the box inside the image. Boxes may overlap.

    Raises:
        ConfigurationError: If the configuration does not fit the image.
    """
    if config.mode is not SamplingMode.OFFGRID:
        raise ConfigurationError(
            f"Expected sampler.mode=offgrid. Found: {config.mode.value}"
        )
    config.check(dims)
    count = config.count_for(dims)
    low, high = config.size_range
    widths = rng.integers(low, high + 1, size=count)
    heights = rng.integers(low, high + 1, size=count) if config.anisotropic else widths
    xs = rng.integers(0, dims.width - widths + 1)
    ys = rng.integers(0, dims.height - heights + 1)
    return [
        PatchBox(int(x), int(y), int(w), int(h))
        for x, y, w, h in zip(xs, ys, widths, heights)
    ]


def sample_grid(dims: ImageDims, patch_size: int) -> List[PatchBox]:
    """Tile the image with non-overlapping P x P boxes in row-major order.

    Raises:
        ConfigurationError: If H or W is not divisible by the patch size.
    """
    _check_divisible(dims, patch_size)
    return [
        PatchBox(column * patch_size, row * patch_size, patch_size, patch_size)
        for row in range(dims.height // patch_size)
        for column in range(dims.width // patch_size)
    ]


def sample_windows_1d(
    sequence_length: int, config: SamplerConfig, rng: np.random.Generator
) -> List[PatchBox]:
    """Draw N windows of a 1D sequence as boxes of height 1.

    Window lengths are uniform over `[size_min, size_max]` and start offsets are
      uniform over every in-bounds position, so windows are unequally spaced and
      may overlap. Without an explicit patch count, as many windows are drawn as
      would tile the sequence.

    Raises:
        ConfigurationError: If a window would be longer than the sequence.
    """
    low, high = config.size_range
    if high > sequence_length:
        raise ConfigurationError(
            f"Windows of up to {high} samples do not fit a sequence of {sequence_length}"
        )
    count = config.count_for(ImageDims(1, sequence_length))
    widths = rng.integers(low, high + 1, size=count)
    starts = rng.integers(0, sequence_length - widths + 1)
    return [PatchBox(int(start), 0, int(width), 1) for start, width in zip(starts, widths)]


def sample_grid_1d(sequence_length: int, window: int) -> List[PatchBox]:
    """Tile a 1D sequence with consecutive windows of equal length.

    Raises:
        ConfigurationError: If the sequence length is not divisible by the window.
    """
    if window < 1 or sequence_length % window:
        raise ConfigurationError(
            f"A sequence of {sequence_length} samples cannot be tiled by windows "
            f"of {window}"
        )
    return [PatchBox(start, 0, window, 1) for start in range(0, sequence_length, window)]


def sample_boxes(
    dims: ImageDims, config: SamplerConfig, rng: np.random.Generator
) -> List[PatchBox]:
    """Boxes for one item: dispatch on the sampling mode and on images versus 1D
    signals (dims of height 1).
    """
    if dims.height == 1:
        if config.mode is SamplingMode.GRID:
            return sample_grid_1d(dims.width, config.patch_size)
        return sample_windows_1d(dims.width, config, rng)
    if config.mode is SamplingMode.GRID:
        config.check(dims)
        return sample_grid(dims, config.patch_size)
    return sample_offgrid(dims, config, rng)


def boxes_to_array(boxes: Sequence[PatchBox]) -> np.ndarray:
    """Stack boxes into a float64 array of rows (x_s, y_s, width, height)."""
    return np.array(
        [(box.x_s, box.y_s, box.width, box.height) for box in boxes], dtype=np.float64
    ).reshape(-1, 4)


def relative_targets(
    ref: np.ndarray, tgt: np.ndarray, extended: bool = False
) -> np.ndarray:
    """Vectorized relative targets between broadcastable arrays of box rows.

    Args:
        ref: Reference boxes, shape (..., 4) as produced by `boxes_to_array`.
        tgt: Target boxes, same layout.
        extended: Whether to append the width and height ratios.

    Returns:
        Array of shape (..., 2) holding (dx, dy), or (..., 4) holding
          (dx, dy, dw, dh) when extended.

    Raises:
        DegenerateBoxError: If a reference box has zero width or height.
    """
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    ref_w, ref_h = ref[..., 2], ref[..., 3]
    if np.any(ref_w <= 0) or np.any(ref_h <= 0):
        raise DegenerateBoxError("Reference boxes must have positive width and height.")
    ref_cx, ref_cy = ref[..., 0] + ref_w / 2, ref[..., 1] + ref_h / 2
    tgt_cx, tgt_cy = tgt[..., 0] + tgt[..., 2] / 2, tgt[..., 1] + tgt[..., 3] / 2
    columns = [(tgt_cx - ref_cx) / ref_w, (tgt_cy - ref_cy) / ref_h]
    if extended:
        columns += [tgt[..., 2] / ref_w, tgt[..., 3] / ref_h]
    return np.stack(columns, axis=-1)


def relative_target(ref: PatchBox, tgt: PatchBox) -> RelativeTarget:
    """Center offset of `tgt` from `ref`, normalized by the reference width and height."""
    dx, dy = relative_targets(boxes_to_array([ref])[0], boxes_to_array([tgt])[0])
    return RelativeTarget(float(dx), float(dy))


def extended_target(ref: PatchBox, tgt: PatchBox) -> ExtendedTarget:
    """Relative translation plus the width and height ratios of `tgt` to `ref`."""
    values = relative_targets(boxes_to_array([ref])[0], boxes_to_array([tgt])[0], True)
    return ExtendedTarget(*(float(value) for value in values))


def target_matrix(boxes: Sequence[PatchBox], extended: bool = False) -> np.ndarray:
    """Targets for every ordered pair of boxes.

    Returns:
        Array of shape (N, N, 2) or (N, N, 4) where entry (i, j) is the target of
          box j with box i as reference. The diagonal holds the identity target.

    Raises:
        GeometryError: If fewer than two boxes are given.
    """
    if len(boxes) < 2:
        raise GeometryError(f"A target matrix needs at least 2 boxes. Found: {len(boxes)}")
    array = boxes_to_array(boxes)
    return relative_targets(array[:, None, :], array[None, :, :], extended)


def pair_targets(
    boxes: Sequence[PatchBox], selection: PairSelection, extended: bool = False
) -> np.ndarray:
    """Targets for the pairs of a selection, shape (count, 2) or (count, 4)."""
    selection.check(len(boxes))
    array = boxes_to_array(boxes)
    references, targets = selection.pairs[:, 0], selection.pairs[:, 1]
    return relative_targets(array[references], array[targets], extended)


def select_pairs(
    patch_count: int, pair_count: int, rng: np.random.Generator
) -> PairSelection:
    """Draw ordered (reference, target) pairs uniformly, with replacement.

    Self-pairs are never drawn: the target index is drawn from the N - 1 other
      patches.

    Raises:
        ConfigurationError: If there are fewer than two patches or no pairs requested.
    """
    if patch_count < 2:
        raise ConfigurationError(
            f"Pair selection needs at least 2 patches. Found: {patch_count}"
        )
    if pair_count < 1:
        raise ConfigurationError(f"head.pair_count must be at least 1. Found: {pair_count}")
    references = rng.integers(0, patch_count, size=pair_count)
    targets = rng.integers(0, patch_count - 1, size=pair_count)
    targets = targets + (targets >= references)
    return PairSelection(np.stack([references, targets], axis=1))


def all_pairs(patch_count: int) -> PairSelection:
    """Every ordered pair of distinct indices, reference-major."""
    references, targets = np.nonzero(~np.eye(patch_count, dtype=bool))
    return PairSelection(np.stack([references, targets], axis=1))


def write_boxes_csv(path: _FilePath, boxes: Sequence[PatchBox]) -> None:
    """Write one row per box: x_s, y_s, width, height."""
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BOXES_HEADER)
        writer.writerows((box.x_s, box.y_s, box.width, box.height) for box in boxes)


def read_boxes_csv(path: _FilePath) -> List[PatchBox]:
    """Read boxes written by `write_boxes_csv`.

    Raises:
        GeometryError: If the header does not match.
    """
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != BOXES_HEADER:
            raise GeometryError(f"Expected box CSV header {BOXES_HEADER}. Found: {header}")
        return [PatchBox(*(int(value) for value in row)) for row in reader if row]


def _check_divisible(dims: ImageDims, patch_size: int) -> None:
    if patch_size < 1 or dims.height % patch_size or dims.width % patch_size:
        raise ConfigurationError(
            f"Grid sampling needs H and W divisible by the patch size. "
            f"Found: {dims.height}x{dims.width} with P={patch_size}"
        )
