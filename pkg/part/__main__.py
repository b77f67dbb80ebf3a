""" CLI for pretraining, finetuning and inspecting PART models. """
import json
import logging
import sys
from argparse import ArgumentParser, Namespace, RawTextHelpFormatter
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

import numpy as np

from .analysis import (
    PredictionMatrix,
    diagnose,
    pooled_antisymmetry,
    prediction_matrix,
    reconstruct_from_reference,
    write_diagnose_csv,
    write_matrix_csv,
    write_uncertainty_csv,
)
from .backbone import extract_and_resize
from .checkpoint import Checkpoint
from .config import RunConfig, apply_overrides, load_datasets, parse_value, tiny_config
from .dataio import Dataset, Sample, write_pnm, write_raw_images, write_raw_signals
from .definitions import (
    CONFIG_FILE,
    DATASET_FILE,
    DIAGNOSE_FILE,
    EVALUATION_FILE,
    GRADCHECK_FILE,
    IMAGES_FILE,
    SIGNALS_FILE,
    STREAM_EVAL,
    _UTF8,
    canvas_name,
    config_name,
    matrix_name,
    uncertainty_name,
)
from .errors import ConfigurationError, InvalidCheckpointError, InvalidDatasetError
from .geometry import sample_boxes, sample_grid
from .model import PARTModel
from .relhead import HeadKind
from .seeding import generator
from .training import evaluate, finetune, gradient_check, load_model, pretrain

_DESCRIPTION = (
    "Pretrain vision transformers by predicting relative translations of patches. \n"
    "  > gen-data writes a synthetic dataset to raw files. \n"
    "  > pretrain, finetune and probe train models and write checkpoints. \n"
    "  > evaluate, reconstruct and diagnose inspect a checkpoint. \n"
    "  > gradcheck compares analytic and numeric gradients. \n"
    "Any configuration key can be set with a dotted flag, e.g. --train.learning_rate 1e-3"
)
_COMMANDS = (
    "gen-data",
    "pretrain",
    "finetune",
    "probe",
    "evaluate",
    "reconstruct",
    "diagnose",
    "gradcheck",
)


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Run the CLI."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = parse_overrides(extra)
        COMMANDS[args.command](args, overrides)
    except (
        ValueError,
        ArithmeticError,
        OSError,
        InvalidCheckpointError,
        InvalidDatasetError,
    ) as err:
        error(err)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="part", description=_DESCRIPTION, allow_abbrev=False)
    parser.formatter_class = RawTextHelpFormatter
    parser.add_argument("command", choices=_COMMANDS, help="Subcommand to run. ")
    parser.add_argument("--config", type=Path, help="JSON run configuration. ")
    parser.add_argument("--steps", type=int, help="Shortcut for --train.steps. ")
    parser.add_argument(
        "--seed", type=int, help="Shortcut for --train.seed and --sampler.seed. "
    )
    parser.add_argument("--out", type=Path, help="Output directory of the run. ")
    parser.add_argument(
        "--checkpoint",
        type=Path,
        help=(
            "Checkpoint to start from (finetune, probe) or to inspect \n"
            "(evaluate, reconstruct, diagnose). "
        ),
    )
    parser.add_argument("--resume", type=Path, help="Checkpoint of this run to resume. ")
    parser.add_argument(
        "--images", type=int, default=1, help="Items to reconstruct or diagnose. "
    )
    parser.add_argument(
        "--reference",
        type=int,
        help="Reference patch of reconstructions; random per image by default. ",
    )
    parser.add_argument(
        "--ground-truth",
        action="store_true",
        help="Reconstruct from ground-truth targets instead of predictions. ",
    )
    parser.add_argument(
        "--grid", action="store_true", help="Reconstruct from grid patches. "
    )
    parser.add_argument(
        "--split",
        choices=("train", "validation"),
        default="validation",
        help="Dataset split to evaluate, reconstruct or diagnose. ",
    )
    parser.add_argument(
        "--tiny",
        action="store_true",
        help="Gradient check the tiny configuration with every head kind. ",
    )
    parser.add_argument(
        "--signal", action="store_true", help="Gradient check on 1D signals. "
    )
    parser.add_argument(
        "--threshold",
        type=float,
        default=1e-4,
        help="Largest accepted relative gradient error. ",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG. "
    )
    return parser


def parse_overrides(extra: Sequence[str]) -> Dict[str, Any]:
    """Turn `--section.key value` (or `--section.key=value`) flags into overrides.

    Raises:
        ConfigurationError: If a flag is not a dotted configuration key or has no value.
    """
    overrides: Dict[str, Any] = {}
    remaining: List[str] = list(extra)
    while remaining:
        flag = remaining.pop(0)
        if not flag.startswith("--") or "." not in flag:
            raise ConfigurationError(f"Unrecognized argument: {flag}")
        key, _, value = flag[2:].partition("=")
        if not value:
            if not remaining:
                raise ConfigurationError(f"Missing value for --{key}")
            value = remaining.pop(0)
        overrides[key] = parse_value(value)
    return overrides


def resolve_config(
    args: Namespace, overrides: Dict[str, Any], base: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Defaults < `base` (or --config) < dotted flags < --steps/--seed/--out."""
    shortcuts = dict(overrides)
    if args.steps is not None:
        shortcuts["train.steps"] = args.steps
    if args.seed is not None:
        shortcuts["train.seed"] = args.seed
        shortcuts["sampler.seed"] = args.seed
    if args.out is not None:
        shortcuts["out"] = str(args.out)
    if args.config is not None or base is None:
        return RunConfig.from_file(args.config, shortcuts)
    return RunConfig.from_dict(apply_overrides(base, shortcuts))


def gen_data(args: Namespace, overrides: Dict[str, Any]) -> None:
    """Write training and validation items, in that order, to one raw file."""
    run = resolve_config(args, overrides)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    train, validation = load_datasets(run.data)
    items = _Concat(train, validation)
    if items.is_signal:
        path = out / SIGNALS_FILE
        write_raw_signals(path, items)
    else:
        path = out / IMAGES_FILE
        write_raw_images(path, items)
    dims = items.dims
    sidecar = {
        "file": path.name,
        "count": len(items),
        "height": dims.height,
        "width": dims.width,
        "channels": dims.channels,
        "num_classes": items.num_classes,
        "source": run.data.source.value,
    }
    (out / DATASET_FILE).write_text(json.dumps(sidecar, indent=2) + "\n", encoding=_UTF8)
    run.save(out / CONFIG_FILE)
    print(f"Wrote {len(items)} items to {path}")


class _Concat(Dataset):
    def __init__(self, first: Dataset, second: Dataset):
        self.first = first
        self.second = second
        self.dims = first.dims
        self.num_classes = max(first.num_classes, second.num_classes)

    def __len__(self) -> int:
        return len(self.first) + len(self.second)

    def __getitem__(self, index: int) -> Sample:
        self._check_index(index)
        if index < len(self.first):
            return self.first[index]
        return self.second[index - len(self.first)]


def run_pretrain(args: Namespace, overrides: Dict[str, Any]) -> None:
    run = resolve_config(args, {**overrides, "train.mode": "pretrain"})
    train, validation = load_datasets(run.data)
    resume = None if args.resume is None else Checkpoint.load(args.resume)
    checkpoint = pretrain(train, run, Path(run.out), validation, resume)
    print(f"Pretrained for {checkpoint.step} steps; checkpoints in {run.out}")


def run_finetune(args: Namespace, overrides: Dict[str, Any]) -> None:
    run = resolve_config(args, {**overrides, "train.mode": args.command})
    train, validation = load_datasets(run.data)
    start = None if args.checkpoint is None else Checkpoint.load(args.checkpoint)
    resume = None if args.resume is None else Checkpoint.load(args.resume)
    checkpoint = finetune(start, train, run, Path(run.out), resume)
    if len(validation):
        metrics = evaluate(checkpoint, validation)
        print(json.dumps(metrics, sort_keys=True))


def run_evaluate(args: Namespace, overrides: Dict[str, Any]) -> None:
    checkpoint = _require_checkpoint(args)
    run = resolve_config(args, overrides, checkpoint.config)
    dataset = _split(run, args.split)
    metrics = evaluate(checkpoint, dataset)
    out = _echo_config(run, "evaluate")
    report = {"checkpoint": str(args.checkpoint), "split": args.split, "metrics": metrics}
    _write_json(out / EVALUATION_FILE, report)
    print(json.dumps(metrics, sort_keys=True))


def run_reconstruct(args: Namespace, overrides: Dict[str, Any]) -> None:
    """Write one canvas per item; ground-truth grid canvases must match the image."""
    checkpoint = None if args.ground_truth else _require_checkpoint(args)
    base = None if checkpoint is None else checkpoint.config
    run = resolve_config(args, overrides, base)
    dataset = _split(run, args.split)
    if dataset.is_signal:
        raise ConfigurationError("reconstruct renders images; the data holds 1D signals")
    model = None if checkpoint is None else load_model(checkpoint)
    out = _echo_config(run, "reconstruct")
    worst = 0.0
    for index in range(min(args.images, len(dataset))):
        image = dataset[index].data
        rng = generator(run.sampler.seed, STREAM_EVAL, index)
        if args.grid:
            boxes = sample_grid(dataset.dims, run.sampler.patch_size)
        else:
            boxes = sample_boxes(dataset.dims, run.sampler, rng)
        patches = extract_and_resize(image, boxes, run.sampler.patch_size)
        if model is None:
            matrix = PredictionMatrix.from_truth(boxes, (0, 1, 2, 3))
        else:
            matrix = prediction_matrix(model, image, boxes)  # type: ignore
        reference = args.reference
        if reference is None:
            reference = int(rng.integers(0, len(boxes)))
        canvas = reconstruct_from_reference(patches, matrix, reference, dataset.dims)
        path = out / canvas_name(index, dataset.dims.channels)
        write_pnm(path, canvas.render())
        error_value = float(np.abs(canvas.frame_view() - image).max())
        worst = max(worst, error_value)
        print(f"{path} reference={reference} frame_error={error_value:.6g}")
    if args.ground_truth and args.grid and worst > 0:
        raise ArithmeticError(f"Ground-truth grid reconstruction is off by {worst}")


def run_diagnose(args: Namespace, overrides: Dict[str, Any]) -> None:
    """Matrices, uncertainty reports and one summary row per item."""
    checkpoint = _require_checkpoint(args)
    run = resolve_config(args, overrides, checkpoint.config)
    model = load_model(checkpoint)
    if not isinstance(model, PARTModel):
        raise InvalidCheckpointError("diagnose needs a pretraining checkpoint")
    dataset = _split(run, args.split)
    out = _echo_config(run, "diagnose")
    diagnoses = []
    for index in range(min(args.images, len(dataset))):
        rng = generator(run.sampler.seed, STREAM_EVAL, index)
        boxes = sample_boxes(dataset.dims, run.sampler, rng)
        diagnosis = diagnose(model, dataset[index].data, boxes)
        write_matrix_csv(out / matrix_name(index), diagnosis.matrix)
        write_uncertainty_csv(out / uncertainty_name(index), diagnosis.uncertainty)
        diagnoses.append(diagnosis)
    write_diagnose_csv(out / DIAGNOSE_FILE, diagnoses)
    pooled = pooled_antisymmetry([diagnosis.matrix for diagnosis in diagnoses])
    dispersion = np.mean([item.uncertainty.dispersion.mean() for item in diagnoses])
    print(
        f"images={len(diagnoses)} antisymmetry_correlation={pooled} "
        f"mean_dispersion={dispersion:.6g} (standard deviation) "
        f"report={out / DIAGNOSE_FILE}"
    )


def run_gradcheck(args: Namespace, overrides: Dict[str, Any]) -> None:
    """Exit 1 when any checked configuration exceeds the threshold."""
    if args.tiny:
        seed = 0 if args.seed is None else args.seed
        if args.out is not None:
            overrides = {**overrides, "out": str(args.out)}
        runs = [tiny_config(kind, args.signal, seed) for kind in HeadKind]
        runs = [run.replace(overrides) for run in runs]
    else:
        runs = [resolve_config(args, {**overrides, "train.precision": "float64"})]
    worst = 0.0
    heads: Dict[str, float] = {}
    for run in runs:
        train, _ = load_datasets(run.data)
        value = gradient_check(run, train)
        worst = max(worst, value)
        heads[run.head.kind.value] = value
        out = _echo_config(run, f"gradcheck_{run.head.kind.value}")
        print(f"head={run.head.kind.value} max_relative_error={value:.3e}")
    print(f"max_relative_error={worst:.3e}")
    report = {"threshold": args.threshold, "max_relative_error": worst, "heads": heads}
    _write_json(out / GRADCHECK_FILE, report)
    if worst > args.threshold:
        raise ArithmeticError(
            f"Max relative gradient error {worst:.3e} exceeds the threshold "
            f"{args.threshold:.3e}"
        )


def _require_checkpoint(args: Namespace) -> Checkpoint:
    if args.checkpoint is None:
        raise ConfigurationError(f"part {args.command} needs --checkpoint")
    return Checkpoint.load(args.checkpoint)


def _split(run: RunConfig, split: str) -> Dataset:
    train, validation = load_datasets(run.data)
    return train if split == "train" else validation


def _echo_config(run: RunConfig, command: str) -> Path:
    """Create the output directory and write the effective configuration into it."""
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / config_name(command))
    return out


def _write_json(path: Path, report: Dict[str, Any]) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding=_UTF8)


def error(err: BaseException) -> NoReturn:
    """Print a machine-readable error line to stderr and exit."""
    message = str(err).replace("\n", " ")
    print(f"ERROR | {type(err).__name__} | {message}", file=sys.stderr)
    sys.exit(1)


COMMANDS = {
    "gen-data": gen_data,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "probe": run_finetune,
    "evaluate": run_evaluate,
    "reconstruct": run_reconstruct,
    "diagnose": run_diagnose,
    "gradcheck": run_gradcheck,
}


if __name__ == "__main__":
    main()
