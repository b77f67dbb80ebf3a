""" Relative encoders: from patch embeddings and pair indices to predicted targets.

Three heads are available. The cross-attention head reduces each concatenated
  (reference, target) pair to a query and attends over all patch embeddings;
  the pairwise MLP sees only the two selected rows; the full MLP maps every patch
  embedding at once to the targets of all N^2 ordered pairs.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, GeometryError
from .kernel import (
    Linear,
    Module,
    Tensor,
    concat_last_dim,
    gelu,
    mse,
    reshape,
    take_rows,
    transpose,
)
from .backbone import attend


class HeadKind(str, Enum):
    CROSS_ATTENTION = "cross_attention"
    PAIRWISE_MLP = "pairwise_mlp"
    FULL_MLP = "full_mlp"


class TargetMode(str, Enum):
    BASE = "base"
    EXTENDED = "extended"


@dataclass(frozen=True)
class HeadConfig:
    # noinspection PyUnresolvedReferences
    """Relative encoder options.

    Args:
        kind: Which relative encoder to build.
        heads: Attention heads of the cross-attention head; must divide d.
        projections: Learn query, key and value projections instead of using the
            embeddings directly.
        standardize_targets: Standardize targets per batch before the loss.
    """
    kind: HeadKind = HeadKind.CROSS_ATTENTION
    heads: int = 1
    projections: bool = False
    standardize_targets: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", HeadKind(self.kind))
        if self.heads < 1:
            raise ConfigurationError(f"head.heads must be at least 1. Found: {self.heads}")


def target_columns(mode: TargetMode, one_dimensional: bool) -> Tuple[int, ...]:
    """Columns of the (dx, dy, dw, dh) target layout that a run predicts.

    1D windows only move along x, so dy (and dh) are dropped.
    """
    if TargetMode(mode) is TargetMode.EXTENDED:
        return (0, 2) if one_dimensional else (0, 1, 2, 3)
    return (0,) if one_dimensional else (0, 1)


def concat_pairs(x: Tensor, pairs: np.ndarray, reducer: Optional[Linear] = None) -> Tensor:
    """Concatenate the reference and target rows of every pair.

    Args:
        x: Patch embeddings of shape (B, N, d).
        pairs: Integer array (B, K, 2) or (K, 2) of (reference, target) indices.
        reducer: Optional linear map 2d -> d applied to the concatenation.

    Returns:
        Tensor of shape (B, K, 2d), or (B, K, d) when reduced.

    Raises:
        GeometryError: If an index is out of range or a pair repeats a patch.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    patch_count = x.shape[1]
    if pairs.size and (pairs.min() < 0 or pairs.max() >= patch_count):
        raise GeometryError(f"Pair indices must lie in [0, {patch_count})")
    if np.any(pairs[..., 0] == pairs[..., 1]):
        raise GeometryError("A pair may not use the same patch as reference and target.")
    joined = concat_last_dim(take_rows(x, pairs[..., 0]), take_rows(x, pairs[..., 1]))
    return joined if reducer is None else reducer(joined)


class CrossAttentionHead(Module):
    """Pair queries attend over every patch embedding; a linear map emits the targets."""

    def __init__(
        self,
        width: int,
        arity: int,
        config: HeadConfig,
        rng: np.random.Generator,
        dtype: type = np.float64,
    ):
        if width % config.heads:
            raise ConfigurationError(
                f"head.heads={config.heads} must divide the embedding width {width}"
            )
        self.heads = config.heads
        self.reducer = Linear(2 * width, width, rng, dtype=dtype)
        self.query: Optional[Linear] = None
        self.key: Optional[Linear] = None
        self.value: Optional[Linear] = None
        if config.projections:
            self.query = Linear(width, width, rng, bias=False, dtype=dtype)
            self.key = Linear(width, width, rng, bias=False, dtype=dtype)
            self.value = Linear(width, width, rng, bias=False, dtype=dtype)
        self.output = Linear(width, arity, rng, dtype=dtype)

    def __call__(self, x: Tensor, pairs: np.ndarray) -> Tensor:
        query = concat_pairs(x, pairs, self.reducer)
        return cross_attention_predict(query, x, self)


def cross_attention_predict(pairs: Tensor, x: Tensor, head: CrossAttentionHead) -> Tensor:
    """Attend from pair embeddings (B, K, d) over patch embeddings (B, N, d)."""
    query, key, value = pairs, x, x
    if head.query is not None:
        query, key, value = head.query(pairs), head.key(x), head.value(x)
    return head.output(cross_attend(query, key, value, head.heads))


def cross_attend(query: Tensor, key: Tensor, value: Tensor, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention of (B, K, d) queries over (B, N, d) keys."""
    batch, queries, width = query.shape
    keys = key.shape[1]
    if key.shape[2] != width or value.shape[:2] != key.shape[:2]:
        raise ConfigurationError(
            f"Cross attention widths differ: query {query.shape}, key {key.shape}, "
            f"value {value.shape}"
        )
    if heads == 1:
        return attend(query, key, value)
    head_width = width // heads

    def split(tensor: Tensor, rows: int) -> Tensor:
        return transpose(reshape(tensor, (batch, rows, heads, head_width)), (0, 2, 1, 3))

    context = attend(split(query, queries), split(key, keys), split(value, keys))
    return reshape(transpose(context, (0, 2, 1, 3)), (batch, queries, width))


class PairwiseMLPHead(Module):
    """Two-layer MLP 2d -> d -> arity applied to each concatenated pair on its own."""

    def __init__(self, width: int, arity: int, rng: np.random.Generator, dtype: type):
        self.fc1 = Linear(2 * width, width, rng, dtype=dtype)
        self.fc2 = Linear(width, arity, rng, dtype=dtype)

    def __call__(self, x: Tensor, pairs: np.ndarray) -> Tensor:
        return pairwise_mlp_predict(concat_pairs(x, pairs), self)


def pairwise_mlp_predict(rows: Tensor, head: PairwiseMLPHead) -> Tensor:
    return head.fc2(gelu(head.fc1(rows)))


class FullMLPHead(Module):
    """One linear map from all N*d embedding values to the N^2 * arity pair targets."""

    def __init__(
        self,
        patch_count: int,
        width: int,
        arity: int,
        rng: np.random.Generator,
        dtype: type,
    ):
        self.patch_count = patch_count
        self.arity = arity
        outputs = patch_count**2 * arity
        self.projection = Linear(patch_count * width, outputs, rng, dtype=dtype)

    def __call__(self, x: Tensor, pairs: np.ndarray) -> Tensor:
        return full_mlp_predict(x, pairs, self)


def full_mlp_predict(x: Tensor, pairs: np.ndarray, head: FullMLPHead) -> Tensor:
    """Predict every ordered pair, then gather the requested ones.

    Raises:
        ConfigurationError: If the sequence length differs from the one the head was
            built for.
    """
    batch, patch_count, width = x.shape
    if patch_count != head.patch_count:
        raise ConfigurationError(
            f"The full MLP head was built for {head.patch_count} patches. "
            f"Found: {patch_count}"
        )
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= patch_count):
        raise GeometryError(f"Pair indices must lie in [0, {patch_count})")
    every_pair = head.projection(reshape(x, (batch, patch_count * width)))
    every_pair = reshape(every_pair, (batch, patch_count**2, head.arity))
    return take_rows(every_pair, pairs[..., 0] * patch_count + pairs[..., 1])


def build_head(
    config: HeadConfig,
    width: int,
    arity: int,
    patch_count: int,
    rng: np.random.Generator,
    dtype: type = np.float64,
) -> Module:
    if config.kind is HeadKind.CROSS_ATTENTION:
        return CrossAttentionHead(width, arity, config, rng, dtype)
    if config.kind is HeadKind.PAIRWISE_MLP:
        return PairwiseMLPHead(width, arity, rng, dtype)
    return FullMLPHead(patch_count, width, arity, rng, dtype)


def pretrain_loss(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Mean squared error over all pairs and target coordinates."""
    return mse(pred, truth)


def standardize(targets: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance targets per coordinate over the batch."""
    flat = targets.reshape(-1, targets.shape[-1])
    spread = np.maximum(flat.std(axis=0), 1e-12)
    return (targets - flat.mean(axis=0)) / spread
