""" Models assembled from the trunk: the pretraining model and the classifier. """
from typing import Dict, Sequence, Tuple

import numpy as np

from .backbone import VisionTransformer, ViTConfig, extract_and_resize, in_features_for
from .dataio import instance_normalize
from .errors import ConfigurationError, ShapeError
from .geometry import ImageDims, PatchBox
from .kernel import LayerNorm, Linear, Module, Tensor
from .relhead import HeadConfig, build_head


class PARTModel(Module):
    """Positionless trunk followed by a relative encoder.

    Args:
        config: Trunk shape; `use_positional` must be False.
        head_config: Relative encoder options.
        dims: Dims of the images (or signals) the model reads.
        columns: Columns of the (dx, dy, dw, dh) layout the head predicts.
        patch_count: Patches per image; only the full MLP head depends on it.
        rng: Initialization stream.
        dtype: Storage precision.

    Raises:
        ConfigurationError: If the trunk would receive position information.
    """

    def __init__(
        self,
        config: ViTConfig,
        head_config: HeadConfig,
        dims: ImageDims,
        columns: Tuple[int, ...],
        patch_count: int,
        rng: np.random.Generator,
        dtype: type = np.float64,
    ):
        if config.use_positional:
            raise ConfigurationError("model.use_positional must be false for pretraining")
        self.columns = tuple(columns)
        self.patch_count = patch_count
        arity = len(self.columns)
        in_features = in_features_for(config, dims)
        self.trunk = VisionTransformer(config, in_features, rng, dtype=dtype)
        width = config.embed_dim
        self.head = build_head(head_config, width, arity, patch_count, rng, dtype)

    def encode(self, values: Tensor) -> Tensor:
        """Patch embeddings X' of shape (B, N, d), without the [CLS] row."""
        return self.trunk.patch_tokens(self.trunk(values))

    @property
    def dtype(self) -> np.dtype:
        return self.trunk.embedding.projection.weight.dtype

    def predict(self, values: Tensor, pairs: np.ndarray) -> Tensor:
        """Predicted targets of shape (B, K, arity) for pairs (B, K, 2) or (K, 2)."""
        return self.head(self.encode(values), pairs)


class Classifier(Module):
    """Trunk with learnable positions and a linear head on the final [CLS] embedding.

    Args:
        trunk: The (possibly pretrained) trunk; a position table is attached when it
            has none.
        num_classes: Output classes.
        max_positions: Position table rows, patches plus one for [CLS].
        rng: Initialization stream.
        probe: Freeze everything but the position table and the classifier.
    """

    def __init__(
        self,
        trunk: VisionTransformer,
        num_classes: int,
        max_positions: int,
        rng: np.random.Generator,
        probe: bool = False,
    ):
        if num_classes < 2:
            raise ConfigurationError(
                f"A classifier needs at least 2 classes. Found: {num_classes}"
            )
        if trunk.embedding.cls is None:
            raise ConfigurationError("Finetuning needs a trunk built with model.use_cls")
        dtype = trunk.embedding.projection.weight.dtype
        width = trunk.config.embed_dim
        self.trunk = trunk
        if trunk.positions is None:
            trunk.enable_positions(max_positions, rng)
        self.norm = LayerNorm(width, dtype=dtype)
        self.classifier = Linear(width, num_classes, rng, dtype=dtype)
        if probe:
            trunk.freeze()
            trunk.positions.requires_grad = True  # type: ignore

    def __call__(self, values: Tensor) -> Tensor:
        """Class logits of shape (B, num_classes)."""
        x = self.trunk(values)
        return self.classifier(self.norm(self.trunk.cls_token(x)))


def patch_values(
    image: np.ndarray, boxes: Sequence[PatchBox], patch_size: int, dtype: type = np.float64
) -> np.ndarray:
    """Resized, flattened patches of one item, shape (N, F).

    Images give P x P patches. Signals (height 1) give windows of P samples, each
      instance-normalized per channel.
    """
    if image.shape[0] == 1:
        sequence = extract_and_resize(image, boxes, (1, patch_size))
        windows = [
            instance_normalize(sequence.patch(index)[0], warn=False)[0].reshape(-1)
            for index in range(len(boxes))
        ]
        return np.stack(windows).astype(dtype)
    return extract_and_resize(image, boxes, patch_size).values.astype(dtype)


def trunk_state(
    state: Dict[str, np.ndarray], prefix: str = "trunk."
) -> Dict[str, np.ndarray]:
    """The trunk entries of a saved state, with the prefix removed."""
    start = len(prefix)
    return {name[start:]: value for name, value in state.items() if name.startswith(prefix)}


def load_trunk(trunk: VisionTransformer, state: Dict[str, np.ndarray]) -> None:
    """Copy pretrained trunk weights into a freshly built trunk.

    A position table missing from the state keeps its fresh initialization.

    Raises:
        ShapeError: If a stored tensor does not fit the trunk, or the state holds no
            trunk weights at all.
    """
    weights = trunk_state(state)
    if not weights:
        raise ShapeError("The checkpoint holds no trunk weights")
    missing = trunk.load_state_dict(weights, strict=False)
    unexpected = [name for name in missing if name != "positions"]
    if unexpected:
        raise ShapeError(f"Trunk weights missing from the checkpoint: {unexpected}")
