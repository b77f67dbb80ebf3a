""" Positionless vision transformer over resized patch boxes.

Boxes are cropped, bilinearly resized to the transformer patch shape, flattened
  and linearly projected. No position information enters during pretraining; a
  learnable position table is added back for finetuning.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, GeometryError, NumericError, ShapeError
from .geometry import ImageDims, PatchBox
from .kernel import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    concat,
    gelu,
    matmul,
    narrow,
    reshape,
    row_softmax,
    scale,
    transpose,
    trunc_normal,
)


@dataclass(frozen=True)
class ViTConfig:
    # noinspection PyUnresolvedReferences
    """Shape of the transformer trunk.

    Args:
        embed_dim: Embedding width d.
        depth: Number of transformer blocks.
        heads: Attention heads per block; must divide `embed_dim`.
        mlp_ratio: Hidden width of the block MLP as a multiple of d.
        patch_size: Side P every box is resized to (P samples for 1D windows).
        use_cls: Prepend a learnable [CLS] token.
        use_positional: Add a learnable position table before the blocks.
    """
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 4
    use_cls: bool = True
    use_positional: bool = False

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(
                f"model.embed_dim must be a positive multiple of model.heads. "
                f"Found: {self.embed_dim}, {self.heads}"
            )
        if self.depth < 0 or self.mlp_ratio < 1 or self.patch_size < 1:
            raise ConfigurationError(
                "model.depth must be >= 0, model.mlp_ratio and model.patch_size >= 1"
            )


@dataclass(frozen=True)
class PatchSequence:
    # noinspection PyUnresolvedReferences
    """Resized, flattened patches aligned by index with the boxes they came from.

    Args:
        values: Array of shape (N, ph * pw * C), rows flattened as (row, column, channel).
        boxes: The source boxes.
        patch_shape: (ph, pw) every box was resized to.
    """
    values: np.ndarray
    boxes: Tuple[PatchBox, ...]
    patch_shape: Tuple[int, int]

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] != len(self.boxes):
            raise ShapeError(
                f"Patch values {self.values.shape} do not align with "
                f"{len(self.boxes)} boxes"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[1] // (self.patch_shape[0] * self.patch_shape[1])

    def patch(self, index: int) -> np.ndarray:
        """One patch as an array of shape (ph, pw, C)."""
        return self.values[index].reshape(*self.patch_shape, self.channels)


def extract_and_resize(
    image: np.ndarray,
    boxes: Sequence[PatchBox],
    patch_size: Union[int, Tuple[int, int]],
) -> PatchSequence:
    """Crop every box and resize it bilinearly to the patch shape.

    Args:
        image: Array of shape (H, W, C) or (H, W); a 1D signal is an image of height 1.
        boxes: Boxes inside the image.
        patch_size: P for P x P patches, or an explicit (ph, pw).

    Raises:
        GeometryError: If a box reaches outside the image.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    dims = ImageDims(*image.shape)
    patch_shape = (patch_size, patch_size) if isinstance(patch_size, int) else patch_size
    rows = []
    for box in boxes:
        if not box.fits(dims):
            raise GeometryError(
                f"Box {box} reaches outside the {dims.height}x{dims.width} image"
            )
        crop = image[box.y_s : box.y_e, box.x_s : box.x_e, :]
        rows.append(resize_bilinear(crop, *patch_shape).reshape(-1))
    width = patch_shape[0] * patch_shape[1] * dims.channels
    values = np.stack(rows) if rows else np.zeros((0, width))
    return PatchSequence(values, tuple(boxes), tuple(patch_shape))  # type: ignore


def resize_bilinear(crop: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling of an (h, w, C) array with half-pixel sample centers.

    Output pixel u samples the input at `(u + 0.5) * in / out - 0.5`, clamped to
      the crop, so equal sizes are an exact copy and a 2x reduction averages
      2 x 2 blocks.
    """
    if crop.shape[:2] == (height, width):
        return crop.copy()
    top, bottom, row_weight = _sample_points(crop.shape[0], height)
    left, right, column_weight = _sample_points(crop.shape[1], width)
    row_weight = row_weight[:, None, None]
    rows = crop[top] * (1 - row_weight) + crop[bottom] * row_weight
    column_weight = column_weight[None, :, None]
    return rows[:, left] * (1 - column_weight) + rows[:, right] * column_weight


def _sample_points(
    size_in: int, size_out: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    source = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    source = np.clip(source, 0, size_in - 1)
    low = np.floor(source).astype(np.int64)
    high = np.minimum(low + 1, size_in - 1)
    return low, high, source - low


class PatchEmbedding(Module):
    """Linear projection of flattened patches, with an optional leading [CLS] row."""

    def __init__(
        self, in_features: int, config: ViTConfig, rng: np.random.Generator, dtype: type
    ):
        self.projection = Linear(in_features, config.embed_dim, rng, dtype=dtype)
        self.cls: Optional[Parameter] = None
        if config.use_cls:
            self.cls = Parameter(trunc_normal(rng, (1, config.embed_dim), dtype))

    def __call__(self, values: Tensor) -> Tensor:
        x = self.projection(values)
        if self.cls is None:
            return x
        batch, _, width = x.shape
        cls_rows = add(Tensor(np.zeros((batch, 1, width), dtype=x.dtype)), self.cls)
        return concat([cls_rows, x], axis=1)


class SelfAttention(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator, dtype: type):
        width = config.embed_dim
        self.heads = config.heads
        self.qkv = Linear(width, 3 * width, rng, bias=False, dtype=dtype)
        self.projection = Linear(width, width, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        batch, tokens, width = x.shape
        head_width = width // self.heads
        qkv = reshape(self.qkv(x), (batch, tokens, 3, self.heads, head_width))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        split_shape = (batch, self.heads, tokens, head_width)
        query, key, value = (
            reshape(narrow(qkv, 0, index, index + 1), split_shape) for index in range(3)
        )
        context = attend(query, key, value)
        context = reshape(transpose(context, (0, 2, 1, 3)), (batch, tokens, width))
        return self.projection(context)


class TransformerBlock(Module):
    """Pre-norm block: x + attention(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator, dtype: type):
        hidden = config.embed_dim * config.mlp_ratio
        self.attention_norm = LayerNorm(config.embed_dim, dtype=dtype)
        self.attention = SelfAttention(config, rng, dtype)
        self.mlp_norm = LayerNorm(config.embed_dim, dtype=dtype)
        self.fc1 = Linear(config.embed_dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, config.embed_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attention(self.attention_norm(x)))
        return add(x, self.fc2(gelu(self.fc1(self.mlp_norm(x)))))


class VisionTransformer(Module):
    """Patch embedding followed by transformer blocks.

    Args:
        config: Trunk shape.
        in_features: Width of a flattened patch, ph * pw * C.
        rng: Initialization stream.
        max_positions: Rows of the position table (tokens including [CLS]); only
            used when `config.use_positional`.
        dtype: Storage precision.
    """

    def __init__(
        self,
        config: ViTConfig,
        in_features: int,
        rng: np.random.Generator,
        max_positions: int = 0,
        dtype: type = np.float64,
    ):
        self.config = config
        self.in_features = in_features
        self.embedding = PatchEmbedding(in_features, config, rng, dtype)
        self.positions: Optional[Parameter] = None
        if config.use_positional:
            self.enable_positions(max_positions, rng)
        self.blocks = [TransformerBlock(config, rng, dtype) for _ in range(config.depth)]

    def enable_positions(self, max_positions: int, rng: np.random.Generator) -> None:
        """Attach a freshly initialized position table (finetuning)."""
        if max_positions < 1:
            raise ConfigurationError("A position table needs at least one row")
        dtype = self.embedding.projection.weight.dtype
        self.positions = Parameter(
            trunc_normal(rng, (max_positions, self.config.embed_dim), dtype)
        )

    def __call__(self, values: Tensor) -> Tensor:
        x = embed(values, self.embedding)
        if self.positions is not None:
            x = add_positional(x, self.positions)
        return encode(x, self.blocks)

    def patch_tokens(self, x: Tensor) -> Tensor:
        """Drop the [CLS] row, leaving one row per patch."""
        if self.embedding.cls is None:
            return x
        return narrow(x, 1, 1, x.shape[1])

    def cls_token(self, x: Tensor) -> Tensor:
        if self.embedding.cls is None:
            raise ConfigurationError("The trunk was built without a [CLS] token")
        return reshape(narrow(x, 1, 0, 1), (x.shape[0], x.shape[2]))


def embed(values: Union[Tensor, np.ndarray], embedding: PatchEmbedding) -> Tensor:
    """Project patch rows (N, F) or (B, N, F) to embeddings (B, N [+1], d).

    Raises:
        ShapeError: If the patch width does not match the projection.
    """
    values = values if isinstance(values, Tensor) else Tensor(values)
    if values.ndim == 2:
        values = reshape(values, (1, *values.shape))
    return embedding(values)


def encode(x: Tensor, blocks: Sequence[TransformerBlock]) -> Tensor:
    """Run the transformer blocks; depth 0 returns the input unchanged.

    Raises:
        NumericError: If a block produces non-finite activations.
    """
    for index, block in enumerate(blocks):
        try:
            x = block(x)
        except NumericError as err:
            raise NumericError(f"Transformer block {index}: {err}")
    return x


def add_positional(x: Tensor, table: Parameter) -> Tensor:
    """Add the first T rows of the position table to a (B, T, d) sequence.

    Raises:
        ShapeError: If the table is shorter than the sequence.
    """
    tokens = x.shape[1]
    if table.shape[0] < tokens or table.shape[1] != x.shape[2]:
        raise ShapeError(
            f"Position table {table.shape} cannot cover a sequence of shape {x.shape}"
        )
    return add(x, narrow(table, 0, 0, tokens))


def attend(query: Tensor, key: Tensor, value: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    width = query.shape[-1]
    axes = tuple(range(key.ndim - 2)) + (key.ndim - 1, key.ndim - 2)
    scores = scale(matmul(query, transpose(key, axes)), 1.0 / np.sqrt(width))
    return matmul(row_softmax(scores), value)


def patch_shape_for(config: ViTConfig, dims: ImageDims) -> Tuple[int, int]:
    """Patch shape the trunk expects: P x P for images, 1 x P for 1D signals."""
    return (1, config.patch_size) if dims.height == 1 else (config.patch_size,) * 2


def in_features_for(config: ViTConfig, dims: ImageDims) -> int:
    height, width = patch_shape_for(config, dims)
    return height * width * dims.channels


def stack_sequences(sequences: List[PatchSequence], dtype: type) -> Tensor:
    """Batch patch sequences of equal length into a (B, N, F) tensor."""
    return Tensor(np.stack([sequence.values for sequence in sequences]).astype(dtype))
