""" Definitions used across the PART package. """

# Checkpoint file layout.
CHECKPOINT_MAGIC = b"PARTCKPT"
CHECKPOINT_VERSION = 1

# Raw dataset layout: one label byte precedes every record.
LABEL_BYTES = 1

# Defaults quoted for the pretext task.
DEFAULT_PAIR_COUNT = 2048
DEFAULT_PATCH_SIZE = 4

# Standard deviation of the weights a gradient check runs at.
CHECK_WEIGHT_SCALE = 0.3

# Output file names under a run directory.
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
DIAGNOSE_FILE = "diagnose.csv"
NAN_DUMP_FILE = "nan_dump.json"
DATASET_FILE = "dataset.json"
IMAGES_FILE = "images.bin"
SIGNALS_FILE = "signals.bin"
EVALUATION_FILE = "evaluation.json"
GRADCHECK_FILE = "gradcheck.json"

METRICS_HEADER = ("step", "loss", "learning_rate", "antisymmetry", "wall_time")
BOXES_HEADER = ("x_s", "y_s", "width", "height")
MATRIX_HEADER = ("ref", "tgt", "pred_dx", "pred_dy", "true_dx", "true_dy")
UNCERTAINTY_HEADER = ("patch", "std_x", "std_y", "rank", "pixel_variance")
DIAGNOSE_HEADER = (
    "image",
    "antisymmetry_residual",
    "antisymmetry_correlation",
    "mean_dispersion",
    "dispersion_variance_correlation",
    "solver_residual",
    "position_error",
)

# Random stream identifiers, see `part.seeding`.
STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_PAIRS = 2
STREAM_EVAL = 3
STREAM_DATA = 4

_UTF8 = "utf-8"


def checkpoint_name(step: int) -> str:
    """File name of the checkpoint written after `step` optimizer steps."""
    return f"ckpt_{step}.part"


def canvas_name(identifier: int, channels: int) -> str:
    """File name of a rendered canvas; PGM for single-channel images, PPM otherwise."""
    return f"canvas_{identifier}.{'pgm' if channels == 1 else 'ppm'}"


def matrix_name(identifier: int) -> str:
    return f"matrix_{identifier}.csv"


def uncertainty_name(identifier: int) -> str:
    return f"uncertainty_{identifier}.csv"


def config_name(command: str = "") -> str:
    """`config.json` for runs that train or generate data. Inspection commands echo
    theirs to `config_<command>.json` and leave the training run's config in place.
    """
    return f"config_{command}.json" if command else CONFIG_FILE
