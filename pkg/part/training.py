""" Pretraining, finetuning, linear probing and evaluation.

Every batch is a pure function of `(seed, step)`: image indices, boxes, pair
  subsets and flips come from Philox streams keyed by the step number. Runs are
  therefore reproducible from their seed alone, a resumed run continues exactly
  where an unbroken one would be, and batches can be assembled on worker threads
  without changing a single bit.
"""
import dataclasses
import json
import logging
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .analysis import antisymmetry_score
from .backbone import VisionTransformer, ViTConfig, in_features_for
from .checkpoint import Checkpoint
from .config import RunConfig, TrainMode
from .dataio import Dataset, Subset
from .definitions import (
    CHECK_WEIGHT_SCALE,
    CONFIG_FILE,
    METRICS_FILE,
    NAN_DUMP_FILE,
    STREAM_BATCH,
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_PAIRS,
    _UTF8,
    checkpoint_name,
)
from .errors import ConfigurationError, InvalidCheckpointError, MetricError, NumericError
from .geometry import (
    ImageDims,
    PatchBox,
    pair_targets,
    sample_boxes,
    sample_grid,
    sample_grid_1d,
    select_pairs,
)
from .kernel import Module, Tape, Tensor, cross_entropy, grad_check
from .metrics import (
    MetricsLog,
    MetricsRecord,
    accuracy,
    cohen_kappa,
    coordinate_mse,
    l2_error,
    summarize,
)
from .model import Classifier, PARTModel, load_trunk, patch_values
from .optim import AdamW, learning_rate
from .relhead import pretrain_loss, standardize, target_columns
from .seeding import generator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    # noinspection PyUnresolvedReferences
    """Everything one optimizer step consumes.

    Args:
        step: Optimizer step the batch belongs to.
        indices: Dataset indices of the items, shape (B,).
        values: Resized patches, shape (B, N, F).
        pairs: Pair indices, shape (B, K, 2); empty for classification batches.
        targets: Relative targets of the pairs, shape (B, K, arity).
        labels: Class labels, shape (B,), for classification batches.
    """
    step: int
    indices: np.ndarray
    values: np.ndarray
    pairs: np.ndarray
    targets: np.ndarray
    labels: Optional[np.ndarray] = None


def columns_for(run: RunConfig, dims: ImageDims) -> Tuple[int, ...]:
    return target_columns(run.train.target_mode, dims.height == 1)


def pretrain_batch(dataset: Dataset, run: RunConfig, step: int) -> Batch:
    """Assemble the pretraining batch of one step.

    Boxes and pair subsets are drawn afresh for every image of every step, unless
      `train.freeze_pairs` keys the pair subset on the image index instead.
    """
    train = run.train
    seed = train.seed
    rng = generator(seed, STREAM_BATCH, step)
    indices = rng.integers(0, len(dataset), size=train.batch_size)
    columns = columns_for(run, dataset.dims)
    values, pairs, targets = [], [], []
    for position, index in enumerate(indices):
        rng = generator(seed, STREAM_BATCH, step, position)
        boxes = sample_boxes(dataset.dims, run.sampler, rng)
        if train.freeze_pairs:
            pair_rng = generator(seed, STREAM_PAIRS, int(index))
        else:
            pair_rng = generator(seed, STREAM_PAIRS, step, position)
        selection = select_pairs(len(boxes), train.pair_count, pair_rng)
        image = dataset[int(index)].data
        values.append(patch_values(image, boxes, run.sampler.patch_size, train.dtype))
        pairs.append(selection.pairs)
        targets.append(pair_targets(boxes, selection, extended=True)[:, columns])
        log.debug("step %d: image %d, %d boxes", step, index, len(boxes))
    return Batch(step, indices, np.stack(values), np.stack(pairs), np.stack(targets))


def grid_boxes(run: RunConfig, dims: ImageDims) -> List[PatchBox]:
    """The fixed tiling used when finetuning."""
    if dims.height == 1:
        return sample_grid_1d(dims.width, run.sampler.patch_size)
    return sample_grid(dims, run.sampler.patch_size)


def classification_batch(dataset: Dataset, run: RunConfig, step: int) -> Batch:
    """Assemble a finetuning batch: grid patches, labels and optional flips."""
    train = run.train
    rng = generator(train.seed, STREAM_BATCH, step)
    indices = rng.integers(0, len(dataset), size=train.batch_size)
    flips = rng.random(size=train.batch_size) < 0.5
    boxes = grid_boxes(run, dataset.dims)
    values, labels = [], []
    for index, flip in zip(indices, flips):
        sample = dataset[int(index)]
        image = sample.data
        if train.flip and flip and not dataset.is_signal:
            image = image[:, ::-1]
        values.append(patch_values(image, boxes, run.sampler.patch_size, train.dtype))
        labels.append(sample.label)
    empty = np.zeros((train.batch_size, 0, 2), dtype=np.int64)
    return Batch(
        step,
        indices,
        np.stack(values),
        empty,
        np.zeros((train.batch_size, 0, 0)),
        np.asarray(labels, dtype=np.int64),
    )


class BatchLoader:
    """Yield `make(step)` for every step in order.

    With workers, up to `prefetch` batches are assembled ahead on a thread pool.
      Results are consumed in step order, so the sequence is identical to the
      inline one.
    """

    def __init__(
        self,
        make: Callable[[int], Batch],
        steps: range,
        workers: int = 0,
        prefetch: int = 2,
    ):
        self.make = make
        self.steps = steps
        self.workers = workers
        self.prefetch = prefetch

    def __iter__(self) -> Iterator[Batch]:
        if not self.workers:
            for step in self.steps:
                yield self.make(step)
            return
        remaining = iter(self.steps)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending: Deque[Future] = deque(
                pool.submit(self.make, step) for step in islice(remaining, self.prefetch)
            )
            while pending:
                future = pending.popleft()
                for step in islice(remaining, 1):
                    pending.append(pool.submit(self.make, step))
                yield future.result()


def build_model(run: RunConfig, dims: ImageDims) -> PARTModel:
    """A freshly initialized pretraining model; identical for identical seeds."""
    rng = generator(run.train.seed, STREAM_INIT)
    return PARTModel(
        run.model,
        run.head,
        dims,
        columns_for(run, dims),
        run.sampler.count_for(dims),
        rng,
        run.train.dtype,
    )


def build_classifier(
    run: RunConfig,
    dims: ImageDims,
    num_classes: int,
    trunk_model: Optional[ViTConfig] = None,
) -> Classifier:
    """A classifier over a fresh trunk; pretrained weights are loaded separately."""
    rng = generator(run.train.seed, STREAM_INIT)
    config = trunk_model or run.model
    max_positions = len(grid_boxes(run, dims)) + 1
    in_features = in_features_for(config, dims)
    trunk = VisionTransformer(config, in_features, rng, max_positions, run.train.dtype)
    probe = run.train.mode is TrainMode.PROBE
    return Classifier(trunk, num_classes, max_positions, rng, probe=probe)


def pretrain(
    data: Dataset,
    run: RunConfig,
    out: Optional[Path] = None,
    validation: Optional[Dataset] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Pretrain with the relative translation task.

    Args:
        data: Training images or signals.
        run: The run configuration; `train.mode` must be pretrain.
        out: Run directory for config.json, metrics.csv and checkpoints.
        validation: Held-out items for periodic antisymmetry measurements.
        resume: Continue from this checkpoint instead of initializing.

    Returns:
        The checkpoint after `train.steps` steps.

    Raises:
        ConfigurationError: If the dataset is empty or the configuration is invalid.
        NumericError: If the loss becomes non-finite (after writing nan_dump.json).
    """
    if not len(data):
        raise ConfigurationError("The training dataset is empty")
    if run.train.mode is not TrainMode.PRETRAIN:
        raise ConfigurationError(
            f"Expected train.mode=pretrain. Found: {run.train.mode.value}"
        )
    dims = data.dims
    if dims.height > 1:
        run.sampler.check(dims)
    model = build_model(run, dims)
    meta = {
        "dims": list(dims.shape),
        "columns": list(model.columns),
        "patch_count": model.patch_count,
    }
    return _train(
        model,
        "pretrain",
        meta,
        data,
        run,
        out,
        lambda step: pretrain_batch(data, run, step),
        lambda batch: _pretrain_loss(model, batch, run),
        lambda: _periodic_antisymmetry(model, validation, run),
        resume,
    )


def finetune(
    checkpoint: Optional[Checkpoint],
    labeled: Dataset,
    run: RunConfig,
    out: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Finetune (or linearly probe) a classifier on the [CLS] embedding.

    The relative head of the pretrained checkpoint is discarded, a position table
      is added to the trunk, and patches come from a fixed grid. With
      `train.mode=probe` only the position table and the classifier learn.

    Args:
        checkpoint: A pretraining checkpoint, or None to start from a random trunk.
        labeled: Labeled training items.
        run: The run configuration; `train.mode` must be finetune or probe.
        out: Run directory.
        resume: Continue from a finetuning checkpoint of this run.

    Raises:
        ConfigurationError: If the dataset has no labels or the mode is wrong.
        InvalidCheckpointError: If the checkpoint does not fit the dataset or model.
    """
    if not len(labeled) or not labeled.labeled:
        raise ConfigurationError("Finetuning needs a non-empty labeled dataset")
    if run.train.mode is TrainMode.PRETRAIN:
        raise ConfigurationError("Expected train.mode=finetune or train.mode=probe")
    dims = labeled.dims
    trunk_model = None
    if checkpoint is not None:
        if checkpoint.kind != "pretrain":
            raise InvalidCheckpointError(
                f"Finetuning starts from a pretraining checkpoint. Found: {checkpoint.kind}"
            )
        _check_dims(checkpoint, dims)
        trunk_model = _trunk_config(checkpoint, run.model)
    classifier = build_classifier(run, dims, labeled.num_classes, trunk_model)
    if checkpoint is not None:
        load_trunk(classifier.trunk, checkpoint.parameters)
    meta = {
        "dims": list(dims.shape),
        "num_classes": labeled.num_classes,
        "max_positions": len(grid_boxes(run, dims)) + 1,
        "model": dataclasses.asdict(classifier.trunk.config),
    }
    return _train(
        classifier,
        run.train.mode.value,
        meta,
        labeled,
        run,
        out,
        lambda step: classification_batch(labeled, run, step),
        lambda batch: cross_entropy(classifier(Tensor(batch.values)), batch.labels),
        lambda: None,
        resume,
    )


def _train(
    model: Module,
    kind: str,
    meta: Dict[str, Any],
    data: Dataset,
    run: RunConfig,
    out: Optional[Path],
    make_batch: Callable[[int], Batch],
    loss_of: Callable[[Batch], Tensor],
    measure: Callable[[], Optional[float]],
    resume: Optional[Checkpoint],
) -> Checkpoint:
    train = run.train
    optimizer = AdamW(list(model.named_parameters()), weight_decay=train.weight_decay)
    start = 0
    if resume is not None:
        _restore(model, optimizer, resume, kind)
        start = resume.step
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        run.save(out / CONFIG_FILE)
    metrics = MetricsLog(None if out is None else out / METRICS_FILE)
    metrics.truncate(start)
    started = time.perf_counter()

    def snapshot(step: int) -> Checkpoint:
        parameters = {name: value.copy() for name, value in model.state_dict().items()}
        moments = {name: value.copy() for name, value in optimizer.state_dict().items()}
        return Checkpoint(kind, run.to_dict(), meta, parameters, moments, step, train.seed)

    steps = range(start, train.steps)
    loader = BatchLoader(make_batch, steps, train.workers, train.prefetch)
    for batch in loader:
        rate = learning_rate(
            batch.step, train.learning_rate, train.steps, train.warmup, train.schedule
        )
        optimizer.zero_grad()
        try:
            with Tape() as tape:
                loss = loss_of(batch)
            tape.backward(loss)
        except NumericError as err:
            _dump_nan(out, batch, train.seed, str(err))
            raise NumericError(
                f"Non-finite loss at step {batch.step} (seed {train.seed}, batch stream "
                f"{STREAM_BATCH}, step {batch.step}): {err}"
            )
        optimizer.step(rate)
        done = batch.step + 1
        antisymmetry = None
        if train.eval_interval and done % train.eval_interval == 0:
            antisymmetry = measure()
        elapsed = time.perf_counter() - started
        metrics.append(MetricsRecord(done, loss.item(), rate, antisymmetry, elapsed))
        if train.log_interval and (done % train.log_interval == 0 or done == train.steps):
            log.info("step %d/%d loss=%.6g lr=%.3g", done, train.steps, loss.item(), rate)
        interval = train.checkpoint_interval
        if out is not None and interval and done % interval == 0:
            snapshot(done).save(out / checkpoint_name(done))

    final = snapshot(max(start, train.steps))
    if out is not None:
        final.save(out / checkpoint_name(final.step))
    return final


def _pretrain_loss(model: PARTModel, batch: Batch, run: RunConfig) -> Tensor:
    truth = batch.targets
    if run.head.standardize_targets:
        truth = standardize(truth)
    pred = model.predict(Tensor(batch.values), batch.pairs)
    return pretrain_loss(pred, truth.astype(pred.dtype))


def _periodic_antisymmetry(
    model: PARTModel, validation: Optional[Dataset], run: RunConfig
) -> Optional[float]:
    if validation is None or not len(validation):
        return None
    count = min(run.train.eval_images, len(validation))
    held_out = Subset(validation, 0, count)
    return antisymmetry_score(model, held_out, run.sampler, run.train.seed)


def _restore(model: Module, optimizer: AdamW, checkpoint: Checkpoint, kind: str) -> None:
    if checkpoint.kind != kind:
        raise InvalidCheckpointError(
            f"Cannot resume a {kind} run from a {checkpoint.kind} checkpoint"
        )
    try:
        model.load_state_dict(checkpoint.parameters)
        optimizer.load_state_dict(checkpoint.moments, checkpoint.step)
    except ValueError as err:
        raise InvalidCheckpointError(f"Checkpoint does not fit the model: {err}")
    log.info("Resuming %s run at step %d", kind, checkpoint.step)


def _dump_nan(out: Optional[Path], batch: Batch, seed: int, message: str) -> None:
    if out is None:
        return
    dump = {
        "step": batch.step,
        "seed": seed,
        "batch_stream": [seed, STREAM_BATCH, batch.step],
        "image_indices": [int(index) for index in batch.indices],
        "error": message,
    }
    (out / NAN_DUMP_FILE).write_text(json.dumps(dump, indent=2) + "\n", encoding=_UTF8)
    log.error("Non-finite loss at step %d; wrote %s", batch.step, out / NAN_DUMP_FILE)


def _check_dims(checkpoint: Checkpoint, dims: ImageDims) -> None:
    stored = tuple(checkpoint.meta.get("dims", ()))
    if stored != dims.shape:
        raise InvalidCheckpointError(
            f"The checkpoint was trained on items of shape {stored}, "
            f"the data has {dims.shape}"
        )


def _trunk_config(checkpoint: Checkpoint, requested: ViTConfig) -> ViTConfig:
    stored = RunConfig.from_dict(checkpoint.config).model
    for name in ("embed_dim", "depth", "heads", "mlp_ratio", "patch_size", "use_cls"):
        if getattr(stored, name) != getattr(requested, name):
            raise InvalidCheckpointError(
                f"model.{name}={getattr(requested, name)} does not match the checkpoint "
                f"value {getattr(stored, name)}"
            )
    return stored


def load_model(checkpoint: Checkpoint) -> Module:
    """Rebuild the model a checkpoint was written from, with its parameters.

    Returns:
        A PARTModel for pretraining checkpoints, a Classifier otherwise.

    Raises:
        InvalidCheckpointError: If the stored tensors do not fit the stored config.
    """
    run = RunConfig.from_dict(checkpoint.config)
    dims = ImageDims(*checkpoint.meta["dims"])
    model: Module
    if checkpoint.kind == "pretrain":
        model = build_model(run, dims)
    else:
        trunk_model = ViTConfig(**checkpoint.meta["model"])
        model = build_classifier(run, dims, checkpoint.meta["num_classes"], trunk_model)
    try:
        model.load_state_dict(checkpoint.parameters)
    except ValueError as err:
        raise InvalidCheckpointError(f"Checkpoint does not fit its own config: {err}")
    return model


def evaluate(
    checkpoint: Checkpoint, dataset: Dataset, count: Optional[int] = None
) -> Dict[str, float]:
    """Deterministic validation metrics of a checkpoint.

    Pretraining checkpoints report the per-coordinate MSE (`mse_dx`, `mse_dy`, ...),
      the mean over coordinates `loss` (the pretraining loss), and `l2_error`, the
      mean Euclidean error of the predicted translation. Boxes and pairs come from
      evaluation streams keyed by the item index. Classifiers report `accuracy` and
      `kappa`.

    Raises:
        MetricError: If the dataset does not fit the checkpoint or has no labels for a
            classifier.
    """
    dims = ImageDims(*checkpoint.meta["dims"])
    if dims != dataset.dims:
        raise MetricError(
            f"The checkpoint reads items of shape {dims.shape}, the data has "
            f"{dataset.dims.shape}"
        )
    count = len(dataset) if count is None else min(count, len(dataset))
    if not count:
        raise MetricError("Evaluation needs at least one item")
    model = load_model(checkpoint)
    run = RunConfig.from_dict(checkpoint.config)
    if isinstance(model, PARTModel):
        return _evaluate_pretrain(model, dataset, run, count)
    if not dataset.labeled:
        raise MetricError("Classification metrics need a labeled dataset")
    return _evaluate_classifier(model, dataset, run, count)  # type: ignore


def evaluation_batch(
    dataset: Dataset, run: RunConfig, index: int, columns: Tuple[int, ...]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patches, pairs and targets of item `index` under the evaluation streams."""
    seed = run.train.seed
    boxes = sample_boxes(dataset.dims, run.sampler, generator(seed, STREAM_EVAL, index))
    selection = select_pairs(
        len(boxes), run.train.pair_count, generator(seed, STREAM_EVAL, index, 1)
    )
    image = dataset[index].data
    values = patch_values(image, boxes, run.sampler.patch_size, run.train.dtype)
    targets = pair_targets(boxes, selection, extended=True)[:, columns]
    return values, selection.pairs, targets


def _evaluate_pretrain(
    model: PARTModel, dataset: Dataset, run: RunConfig, count: int
) -> Dict[str, float]:
    predictions, truths = [], []
    for index in range(count):
        values, pairs, targets = evaluation_batch(dataset, run, index, model.columns)
        predictions.append(model.predict(Tensor(values[None]), pairs).numpy()[0])
        truths.append(targets)
    pred, truth = np.concatenate(predictions), np.concatenate(truths)
    per_coordinate = coordinate_mse(pred, truth)
    names = ("dx", "dy", "dw", "dh")
    result = {
        f"mse_{names[column]}": float(value)
        for column, value in zip(model.columns, per_coordinate)
    }
    result["loss"] = float(per_coordinate.mean())
    translation = sum(1 for column in model.columns if column < 2)
    result["l2_error"] = l2_error(pred, truth, translation)
    log.info("evaluate: %s", summarize(result))
    return result


def _evaluate_classifier(
    model: Classifier, dataset: Dataset, run: RunConfig, count: int
) -> Dict[str, float]:
    boxes = grid_boxes(run, dataset.dims)
    predicted, labels = [], []
    for index in range(count):
        sample = dataset[index]
        values = patch_values(sample.data, boxes, run.sampler.patch_size, run.train.dtype)
        predicted.append(int(np.argmax(model(Tensor(values[None])).numpy()[0])))
        labels.append(sample.label)
    predicted_array = np.asarray(predicted, dtype=np.int64)
    label_array = np.asarray(labels, dtype=np.int64)
    result = {
        "accuracy": accuracy(predicted_array, label_array),
        "kappa": cohen_kappa(predicted_array, label_array, dataset.num_classes),
    }
    log.info("evaluate: %s", summarize(result))
    return result


def gradient_check(
    run: RunConfig,
    dataset: Dataset,
    index: int = 0,
    samples: int = 200,
    weight_scale: Optional[float] = CHECK_WEIGHT_SCALE,
) -> float:
    """Largest relative error between tape and finite-difference gradients of the
    pretraining loss on one item, over every parameter of a fresh 64-bit model.

    Args:
        run: A float64 run configuration.
        dataset: Source of the checked item.
        index: Item index.
        samples: Coordinates checked per parameter.
        weight_scale: Standard deviation every parameter is redrawn with before the
            check. At the 0.02 initialization many gradients are smaller than the
            rounding noise of a central difference. None keeps the initial weights.

    Raises:
        ConfigurationError: If the run is not configured for 64-bit precision.
    """
    if run.train.dtype is not np.float64:
        raise ConfigurationError("Gradient checks need train.precision=float64")
    model = build_model(run, dataset.dims)
    if weight_scale is not None:
        weights = generator(run.train.seed, STREAM_EVAL, index, 3)
        for parameter in model.parameters():
            parameter.data = weights.normal(0.0, weight_scale, parameter.shape)
    values, pairs, targets = evaluation_batch(dataset, run, index, model.columns)

    def loss_fn() -> Tensor:
        return pretrain_loss(model.predict(Tensor(values[None]), pairs), targets[None])

    rng = generator(run.train.seed, STREAM_EVAL, index, 2)
    worst = grad_check(loss_fn, model.parameters(), samples=samples, rng=rng)
    count = model.parameter_count()
    log.info("gradient check: %d parameters, max relative error %.3g", count, worst)
    return worst
