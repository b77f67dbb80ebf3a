""" Simplified imports for the PART pretraining package. """
import importlib.metadata as metadata

from .analysis import (
    PredictionMatrix,
    antisymmetry_residual,
    placement_uncertainty,
    prediction_matrix,
    reconstruct_from_reference,
    solve_global_positions,
)
from .checkpoint import Checkpoint
from .config import RunConfig, TrainConfig
from .geometry import ImageDims, PatchBox, SamplerConfig
from .training import evaluate, finetune, pretrain

__version__ = ""
try:
    __version__ = metadata.version(__name__)
except metadata.PackageNotFoundError:
    pass
