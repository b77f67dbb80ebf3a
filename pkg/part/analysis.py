""" Diagnostics of a pretrained model on single images.

All diagnostics start from a `PredictionMatrix`: the predictions of the relative
  head for every ordered pair of one image's patches, next to the ground truth
  of the same boxes. From it this module

    - reconstructs the image by pasting patches relative to one reference,
    - measures how far the predictions are from negative symmetry,
    - measures how consistently every patch is placed by the other patches, and
    - solves for the absolute patch positions that best explain all pairs.

Every diagnostic is exact on the ground-truth matrix, so each can be checked
  without a trained model.
"""
import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import PatchSequence, resize_bilinear
from .dataio import Dataset
from .definitions import DIAGNOSE_HEADER, MATRIX_HEADER, STREAM_EVAL, UNCERTAINTY_HEADER
from .errors import (
    ConfigurationError,
    DegenerateCorrelationWarning,
    GeometryError,
    ShapeError,
)
from .geometry import (
    ImageDims,
    PatchBox,
    SamplerConfig,
    all_pairs,
    boxes_to_array,
    relative_targets,
    sample_boxes,
    target_matrix,
)
from .kernel import Tensor
from .model import PARTModel, patch_values
from .seeding import generator

_FilePath = Union[str, Path]

# Identity target of the (dx, dy, dw, dh) layout.
_IDENTITY = np.array([0.0, 0.0, 1.0, 1.0])


@dataclass(frozen=True)
class PredictionMatrix:
    # noinspection PyUnresolvedReferences
    """Predicted and true targets for every ordered pair of one image's patches.

    Args:
        predicted: Array of shape (N, N, arity); entry (i, j) is the target of patch j
            with patch i as reference. The diagonal holds the identity target.
        truth: Ground truth in the same layout.
        boxes: The N boxes the patches were sampled from.
        columns: Columns of the (dx, dy, dw, dh) layout held in the last axis.
    """
    predicted: np.ndarray
    truth: np.ndarray
    boxes: Tuple[PatchBox, ...]
    columns: Tuple[int, ...]

    def __post_init__(self) -> None:
        count = len(self.boxes)
        expected = (count, count, len(self.columns))
        for name in ("predicted", "truth"):
            array = getattr(self, name)
            if array.shape != expected:
                raise ShapeError(
                    f"Prediction matrix {name} has shape {array.shape}, "
                    f"expected {expected}"
                )
        if not np.all(np.isfinite(self.predicted)):
            raise ShapeError("Prediction matrix holds non-finite entries")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "columns", tuple(self.columns))

    @classmethod
    def from_truth(
        cls, boxes: Sequence[PatchBox], columns: Sequence[int] = (0, 1)
    ) -> "PredictionMatrix":
        """A matrix whose predictions are the exact ground truth. One box gives the
        1x1 identity matrix.

        Raises:
            GeometryError: If no boxes are given.
        """
        if not boxes:
            raise GeometryError("A prediction matrix needs at least one box")
        array = boxes_to_array(boxes)
        truth = relative_targets(array[:, None, :], array[None, :, :], extended=True)
        truth = truth[..., list(columns)]
        return cls(truth.copy(), truth, tuple(boxes), tuple(columns))

    @property
    def patch_count(self) -> int:
        return len(self.boxes)

    @property
    def extended(self) -> bool:
        return 2 in self.columns

    def column(self, name: str, which: str = "predicted") -> Optional[np.ndarray]:
        """The (N, N) slice of one target coordinate, or None if it is not predicted."""
        index = ("dx", "dy", "dw", "dh").index(name)
        if index not in self.columns:
            return None
        return getattr(self, which)[..., self.columns.index(index)]

    def translation(self, which: str = "predicted") -> np.ndarray:
        """The (N, N, t) translation part, t being 1 for signals and 2 for images."""
        positions = [self.columns.index(index) for index in (0, 1) if index in self.columns]
        return getattr(self, which)[..., positions]


def prediction_matrix(
    model: PARTModel, image: np.ndarray, boxes: Sequence[PatchBox]
) -> PredictionMatrix:
    """Run the relative head on all N(N-1) ordered pairs of one image's boxes.

    Raises:
        GeometryError: If fewer than two boxes are given.
        ConfigurationError: If a full MLP head was built for a different patch count.
    """
    count = len(boxes)
    if count < 2:
        raise GeometryError(f"A prediction matrix needs at least 2 boxes. Found: {count}")
    columns = list(model.columns)
    values = patch_values(image, boxes, model.trunk.config.patch_size, model.dtype)
    selection = all_pairs(count)
    pred = model.predict(Tensor(values[None]), selection.pairs).numpy()[0]
    predicted = np.tile(_IDENTITY[columns], (count, count, 1))
    predicted[selection.pairs[:, 0], selection.pairs[:, 1]] = pred
    truth = target_matrix(boxes, extended=True)[..., columns]
    return PredictionMatrix(
        predicted.astype(np.float64), truth, tuple(boxes), tuple(model.columns)
    )


@dataclass
class Canvas:
    # noinspection PyUnresolvedReferences
    """Accumulation buffer of pasted patches.

    Args:
        accumulation: Sum of pasted pixel values, shape (H', W', C).
        weight: Number of patches covering every pixel, shape (H', W').
        origin: Canvas (row, column) of image pixel (0, 0).
        frame: (H, W) of the original image, when known.
    """
    accumulation: np.ndarray
    weight: np.ndarray
    origin: Tuple[int, int]
    frame: Optional[Tuple[int, int]] = None

    def paste(self, pixels: np.ndarray, row: int, column: int) -> None:
        """Add an (h, w, C) block with its top left corner at image (row, column)."""
        top, left = row + self.origin[0], column + self.origin[1]
        height, width = pixels.shape[:2]
        self.accumulation[top : top + height, left : left + width] += pixels
        self.weight[top : top + height, left : left + width] += 1

    def render(self) -> np.ndarray:
        """Overlaps averaged; uncovered pixels are zero."""
        return self.accumulation / np.maximum(self.weight, 1)[:, :, None]

    def frame_view(self) -> np.ndarray:
        """The rendered region covering the original image frame.

        Raises:
            GeometryError: If the canvas was built without a frame.
        """
        if self.frame is None:
            raise GeometryError("This canvas has no image frame")
        top, left = self.origin
        return self.render()[top : top + self.frame[0], left : left + self.frame[1]]

    def frame_mask(self) -> np.ndarray:
        """Boolean (H', W') mask of the original image frame on the canvas."""
        mask = np.zeros(self.weight.shape, dtype=bool)
        if self.frame is not None:
            top, left = self.origin
            mask[top : top + self.frame[0], left : left + self.frame[1]] = True
        return mask


def reconstruct_from_reference(
    patches: PatchSequence,
    matrix: PredictionMatrix,
    ref_index: int,
    dims: Optional[ImageDims] = None,
) -> Canvas:
    """Paste every patch where the predictions place it relative to one reference.

    The reference stays at its own box. Patch j is centered at the reference
      center plus (dx * w_ref, dy * h_ref) and keeps its box size, or, for
      matrices with scale ratios, takes the predicted size (dw * w_ref, dh * h_ref).
      Placements are rounded to whole pixels. The canvas covers every placement
      and, when `dims` is given, the original image frame.

    Raises:
        GeometryError: If `ref_index` is not a patch index or the patches and the
            matrix disagree.
    """
    count = matrix.patch_count
    if not 0 <= ref_index < count:
        raise GeometryError(
            f"Reference index {ref_index} is out of range for {count} patches"
        )
    if len(patches.boxes) != count:
        raise GeometryError(
            f"{len(patches.boxes)} patches do not match a {count}x{count} matrix"
        )
    reference = matrix.boxes[ref_index]
    ref_x, ref_y = reference.center
    dx = matrix.column("dx")[ref_index]  # type: ignore
    dy_column = matrix.column("dy")
    dy = np.zeros(count) if dy_column is None else dy_column[ref_index]
    dw, dh = matrix.column("dw"), matrix.column("dh")
    placements = []
    for index, box in enumerate(matrix.boxes):
        width, height = box.width, box.height
        if dw is not None:
            width = max(1, int(np.rint(dw[ref_index, index] * reference.width)))
        if dh is not None:
            height = max(1, int(np.rint(dh[ref_index, index] * reference.height)))
        center_x = ref_x + dx[index] * reference.width
        center_y = ref_y + dy[index] * reference.height
        column = int(np.rint(center_x - width / 2))
        row = int(np.rint(center_y - height / 2))
        placements.append((row, column, height, width))

    rows = [row for row, _, _, _ in placements]
    rows += [row + height for row, _, height, _ in placements]
    columns = [column for _, column, _, _ in placements]
    columns += [column + width for _, column, _, width in placements]
    if dims is not None:
        rows += [0, dims.height]
        columns += [0, dims.width]
    origin = (-min(rows), -min(columns))
    shape = (max(rows) - min(rows), max(columns) - min(columns))
    canvas = Canvas(
        np.zeros((*shape, patches.channels)),
        np.zeros(shape),
        origin,
        None if dims is None else (dims.height, dims.width),
    )
    for index, (row, column, height, width) in enumerate(placements):
        canvas.paste(resize_bilinear(patches.patch(index), height, width), row, column)
    return canvas


@dataclass(frozen=True)
class AntisymmetryReport:
    # noinspection PyUnresolvedReferences
    """Distance of the translation predictions from negative symmetry.

    Args:
        residual: Array (N, N, t) of theta_ij + theta_ji.
        mean_norm: Mean Euclidean norm of the residual over pairs i < j.
        correlation: Pearson correlation of theta_ij with -theta_ji over pairs i < j,
            each coordinate centered on its own mean, or None when either side has
            zero variance.
    """
    residual: np.ndarray
    mean_norm: float
    correlation: Optional[float]


def pearson(a: np.ndarray, b: np.ndarray, warn: bool = True) -> Optional[float]:
    """Pearson correlation of two equally long samples.

    Returns None, with a DegenerateCorrelationWarning unless `warn=False`, when
      either sample is constant.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(
            f"Correlation needs equally long samples. Found: {a.size}, {b.size}"
        )
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        if warn:
            warnings.warn(
                "Correlation is undefined for a sample with zero variance.",
                DegenerateCorrelationWarning,
            )
        return None
    a = a - a.mean()
    b = b - b.mean()
    value = float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))
    return min(1.0, max(-1.0, value))


def antisymmetry_pairs(
    matrix: PredictionMatrix, centered: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """theta_ij and -theta_ji over pairs i < j, each of shape (N(N-1)/2, t).

    With `centered`, every coordinate of both samples has its mean over the pairs
      removed. Correlations then measure agreement within the image only: a
      prediction that is constant per image adds nothing, instead of pulling a
      pooled correlation towards -1.
    """
    translation = matrix.translation()
    rows, columns = np.triu_indices(matrix.patch_count, 1)
    forward, backward = translation[rows, columns], -translation[columns, rows]
    if centered:
        forward = forward - forward.mean(axis=0)
        backward = backward - backward.mean(axis=0)
    return forward, backward


def antisymmetry_residual(
    matrix: PredictionMatrix, warn: bool = True
) -> AntisymmetryReport:
    """Compare every prediction theta_ij with the negated reverse prediction theta_ji."""
    translation = matrix.translation()
    residual = translation + translation.transpose(1, 0, 2)
    rows, columns = np.triu_indices(matrix.patch_count, 1)
    norms = np.linalg.norm(residual[rows, columns], axis=-1)
    forward, backward = antisymmetry_pairs(matrix, centered=True)
    correlation = pearson(forward, backward, warn)
    return AntisymmetryReport(residual, float(norms.mean()), correlation)


def antisymmetry_score(
    model: PARTModel, dataset: Dataset, sampler: SamplerConfig, seed: int
) -> Optional[float]:
    """Antisymmetry correlation pooled over every pair of every item of a dataset.

    Boxes come from the evaluation stream of each item index, so repeated calls on
      the same data and seed see identical boxes.
    """
    matrices = []
    for index in range(len(dataset)):
        boxes = sample_boxes(dataset.dims, sampler, generator(seed, STREAM_EVAL, index))
        matrices.append(prediction_matrix(model, dataset[index].data, boxes))
    return pooled_antisymmetry(matrices)


def pooled_antisymmetry(matrices: Sequence[PredictionMatrix]) -> Optional[float]:
    """Antisymmetry correlation over the pairs of several matrices at once."""
    if not matrices:
        return None
    pairs = [antisymmetry_pairs(matrix, centered=True) for matrix in matrices]
    forward = np.concatenate([pair[0].reshape(-1) for pair in pairs])
    backward = np.concatenate([pair[1].reshape(-1) for pair in pairs])
    return pearson(forward, backward, warn=False)


@dataclass(frozen=True)
class UncertaintyReport:
    # noinspection PyUnresolvedReferences
    """How consistently each patch is placed by the other patches.

    Args:
        std_x: Standard deviation of the implied x placements of every patch, divided
            by the mean reference width.
        std_y: The same for y and the mean reference height.
        rank: Certainty rank of every patch; 0 is the most consistently placed.
        pixel_variance: Pixel variance of every patch, when known.
    """
    std_x: np.ndarray
    std_y: np.ndarray
    rank: np.ndarray
    pixel_variance: Optional[np.ndarray] = None

    @property
    def dispersion(self) -> np.ndarray:
        return np.hypot(self.std_x, self.std_y)


def implied_placements(
    matrix: PredictionMatrix, boxes: Optional[Sequence[PatchBox]] = None
) -> np.ndarray:
    """Absolute center of patch j implied by reference i, shape (N, N, 2).

    Entry (i, j) is center_i + (dx_ij * w_i, dy_ij * h_i).
    """
    array = boxes_to_array(matrix.boxes if boxes is None else boxes)
    widths, heights = array[:, 2], array[:, 3]
    centers_x = array[:, 0] + widths / 2
    centers_y = array[:, 1] + heights / 2
    dx = matrix.column("dx")
    dy = matrix.column("dy")
    x = centers_x[:, None] + dx * widths[:, None]  # type: ignore
    y = centers_y[:, None] + (0.0 if dy is None else dy * heights[:, None])
    return np.stack(np.broadcast_arrays(x, y), axis=-1)


def placement_uncertainty(
    matrix: PredictionMatrix,
    boxes: Optional[Sequence[PatchBox]] = None,
    exclude: Sequence[int] = (),
    pixel_variance: Optional[np.ndarray] = None,
) -> UncertaintyReport:
    """Spread of the placements every other patch implies for each patch.

    Args:
        matrix: Predictions for one image.
        boxes: Boxes of the references; defaults to the matrix boxes.
        exclude: Reference indices left out of every spread (leave-one-out).
        pixel_variance: Per-patch pixel variance carried into the report.

    Raises:
        GeometryError: If fewer than three patches are given, or fewer than two
            references remain for some patch.
    """
    count = matrix.patch_count
    if count < 3:
        raise GeometryError(
            f"Placement uncertainty needs at least 3 patches. Found: {count}"
        )
    placements = implied_placements(matrix, boxes)
    array = boxes_to_array(matrix.boxes if boxes is None else boxes)
    used = np.ones((count, count), dtype=bool)
    np.fill_diagonal(used, False)
    used[list(exclude), :] = False
    if np.any(used.sum(axis=0) < 2):
        raise GeometryError("Every patch needs at least two references after exclusion")
    spread = np.empty((count, 2))
    for target in range(count):
        spread[target] = placements[used[:, target], target].std(axis=0)
    std_x = spread[:, 0] / array[:, 2].mean()
    std_y = spread[:, 1] / array[:, 3].mean()
    order = np.argsort(np.hypot(std_x, std_y), kind="stable")
    rank = np.empty(count, dtype=np.int64)
    rank[order] = np.arange(count)
    return UncertaintyReport(std_x, std_y, rank, pixel_variance)


def patch_variance(image: np.ndarray, boxes: Sequence[PatchBox]) -> np.ndarray:
    """Pixel variance of every box's crop, over all of its pixels and channels."""
    if image.ndim == 2:
        image = image[:, :, None]
    return np.array([image[box.y_s : box.y_e, box.x_s : box.x_e].var() for box in boxes])


def dispersion_variance_correlation(report: UncertaintyReport) -> Optional[float]:
    """Correlation between placement dispersion and patch pixel variance."""
    if report.pixel_variance is None:
        return None
    return pearson(report.dispersion, report.pixel_variance, warn=False)


@dataclass(frozen=True)
class GlobalPositions:
    # noinspection PyUnresolvedReferences
    """Absolute patch centers consistent with all pairwise predictions.

    Args:
        positions: Array (N, 2) of (x, y) centers in image pixels.
        residual: Euclidean norm of the remaining measurement residuals.
        pin: Index whose true center fixes the translation gauge.
    """
    positions: np.ndarray
    residual: float
    pin: int


def solve_global_positions(
    matrix: PredictionMatrix, boxes: Optional[Sequence[PatchBox]] = None, pin: int = 0
) -> GlobalPositions:
    """Least-squares synchronization of absolute centers.

    Per axis, minimizes sum over i != j of ((p_j - p_i) / s_i - theta_ij)^2, where s_i
      is the reference width (x) or height (y). Patch `pin` is fixed at its true
      center, and the remaining centers solve the normal equations. Signals, which
      predict no y offsets, keep their box centers in y.

    Raises:
        ConfigurationError: If fewer than two patches are given or `pin` is not a
            patch index.
        GeometryError: If the normal equations are singular.
    """
    count = matrix.patch_count
    if count < 2:
        raise ConfigurationError(
            f"Synchronization needs at least 2 patches. Found: {count}"
        )
    if not 0 <= pin < count:
        raise ConfigurationError(f"Pinned index {pin} is out of range for {count} patches")
    array = boxes_to_array(matrix.boxes if boxes is None else boxes)
    centers = array[:, :2] + array[:, 2:] / 2
    pairs = all_pairs(count).pairs
    references, targets = pairs[:, 0], pairs[:, 1]
    free = np.array([index for index in range(count) if index != pin])

    positions = centers.copy()
    squared = 0.0
    for axis, name in enumerate(("dx", "dy")):
        theta = matrix.column(name)
        if theta is None:
            continue
        scale = array[references, 2 + axis]
        design = np.zeros((len(pairs), count))
        design[np.arange(len(pairs)), targets] += 1.0 / scale
        design[np.arange(len(pairs)), references] -= 1.0 / scale
        measured = theta[references, targets]
        rhs = measured - design[:, pin] * centers[pin, axis]
        reduced = design[:, free]
        try:
            solution = np.linalg.solve(reduced.T @ reduced, reduced.T @ rhs)
        except np.linalg.LinAlgError as err:
            raise GeometryError(f"Synchronization system is singular: {err}")
        positions[free, axis] = solution
        squared += float(((reduced @ solution - rhs) ** 2).sum())
    return GlobalPositions(positions, float(np.sqrt(squared)), pin)


def position_error(
    solution: GlobalPositions, boxes: Sequence[PatchBox], in_patch_widths: bool = False
) -> float:
    """Mean Euclidean distance between solved and true centers.

    With `in_patch_widths`, distances are divided by the mean box width.
    """
    array = boxes_to_array(boxes)
    centers = array[:, :2] + array[:, 2:] / 2
    error = float(np.linalg.norm(solution.positions - centers, axis=1).mean())
    return error / array[:, 2].mean() if in_patch_widths else error


@dataclass(frozen=True)
class Diagnosis:
    """Every diagnostic of one image."""

    matrix: PredictionMatrix
    antisymmetry: AntisymmetryReport
    uncertainty: UncertaintyReport
    positions: GlobalPositions

    def row(self, identifier: int) -> List[str]:
        """A diagnose.csv row; undefined correlations are left empty."""

        def text(value: Optional[float]) -> str:
            return "" if value is None else repr(value)

        return [
            str(identifier),
            repr(self.antisymmetry.mean_norm),
            text(self.antisymmetry.correlation),
            repr(float(self.uncertainty.dispersion.mean())),
            text(dispersion_variance_correlation(self.uncertainty)),
            repr(self.positions.residual),
            repr(position_error(self.positions, self.matrix.boxes, in_patch_widths=True)),
        ]


def diagnose(model: PARTModel, image: np.ndarray, boxes: Sequence[PatchBox]) -> Diagnosis:
    """Prediction matrix, antisymmetry, uncertainty and synchronization of one image.

    Raises:
        GeometryError: If fewer than three boxes are given.
    """
    matrix = prediction_matrix(model, image, boxes)
    return Diagnosis(
        matrix,
        antisymmetry_residual(matrix, warn=False),
        placement_uncertainty(matrix, pixel_variance=patch_variance(image, boxes)),
        solve_global_positions(matrix),
    )


def write_matrix_csv(path: _FilePath, matrix: PredictionMatrix) -> None:
    """One row per ordered pair i != j; missing dy columns are written as 0."""
    predicted = matrix.translation()
    truth = matrix.translation("truth")
    if predicted.shape[-1] == 1:
        predicted = np.concatenate([predicted, np.zeros_like(predicted)], axis=-1)
        truth = np.concatenate([truth, np.zeros_like(truth)], axis=-1)
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MATRIX_HEADER)
        for ref, tgt in all_pairs(matrix.patch_count).pairs:
            writer.writerow(
                [int(ref), int(tgt)]
                + [repr(float(value)) for value in predicted[ref, tgt]]
                + [repr(float(value)) for value in truth[ref, tgt]]
            )


def write_uncertainty_csv(path: _FilePath, report: UncertaintyReport) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(UNCERTAINTY_HEADER)
        for patch, (std_x, std_y, rank) in enumerate(
            zip(report.std_x, report.std_y, report.rank)
        ):
            variance = ""
            if report.pixel_variance is not None:
                variance = repr(float(report.pixel_variance[patch]))
            row = [patch, repr(float(std_x)), repr(float(std_y)), int(rank), variance]
            writer.writerow(row)


def write_diagnose_csv(path: _FilePath, diagnoses: Sequence[Diagnosis]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DIAGNOSE_HEADER)
        writer.writerows(diagnosis.row(index) for index, diagnosis in enumerate(diagnoses))
