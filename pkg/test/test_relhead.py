""" Tests for part/relhead.py """
from typing import Any

import numpy as np
import pytest

from part import kernel, relhead
from part.errors import ConfigurationError, GeometryError
from part.kernel import Module, Parameter, Tensor
from part.relhead import HeadConfig, HeadKind, TargetMode

_PATCHES = 5
_WIDTH = 8


@pytest.fixture(name="head", params=list(HeadKind))
def _head(request: Any) -> Module:
    config = HeadConfig(kind=request.param, heads=2, projections=True)
    return relhead.build_head(config, _WIDTH, 2, _PATCHES, np.random.default_rng(0))


def _embeddings(batch: int = 2, seed: int = 1) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=(batch, _PATCHES, _WIDTH)))


# fmt: off
@pytest.mark.parametrize(
    "mode, one_dimensional, expected",
    [(TargetMode.BASE, False, (0, 1)),
     (TargetMode.BASE, True, (0,)),
     (TargetMode.EXTENDED, False, (0, 1, 2, 3)),
     ("extended", True, (0, 2))]
)
# fmt: on
def test_target_columns(mode: TargetMode, one_dimensional: bool, expected: tuple) -> None:
    """Test which target coordinates are predicted for each mode."""
    assert relhead.target_columns(mode, one_dimensional) == expected


def test_head_config_validation() -> None:
    """Test that unknown kinds and zero heads are rejected."""
    with pytest.raises(ValueError):
        HeadConfig(kind="transformer")
    with pytest.raises(ConfigurationError):
        HeadConfig(heads=0)


def test_cross_attention_heads_divide_width() -> None:
    """Test that the attention head count must divide the width."""
    with pytest.raises(ConfigurationError):
        relhead.CrossAttentionHead(_WIDTH, 2, HeadConfig(heads=3), np.random.default_rng(0))


def test_prediction_shape(head: Module) -> None:
    """Test one prediction row per pair, for shared and per-item pair lists."""
    x = _embeddings()
    shared = np.array([[0, 1], [4, 2], [3, 0]])
    assert head(x, shared).shape == (2, 3, 2)
    per_item = np.array([[[0, 1], [1, 0]], [[2, 3], [3, 4]]])
    assert head(x, per_item).shape == (2, 2, 2)


def test_prediction_follows_pair_order(head: Module) -> None:
    """Test that a subset of pairs predicts the matching rows of the full list."""
    x = _embeddings()
    pairs = np.array([[0, 1], [1, 0], [2, 4], [4, 2]])
    full = head(x, pairs).data
    subset = head(x, pairs[[3, 0]]).data
    np.testing.assert_allclose(subset, full[:, [3, 0]])


def test_items_are_independent(head: Module) -> None:
    """Test that a batch predicts each item as if it were alone."""
    x = _embeddings()
    pairs = np.array([[0, 3], [2, 1]])
    batched = head(x, pairs).data
    alone = head(Tensor(x.data[1:]), pairs).data
    np.testing.assert_allclose(batched[1:], alone, atol=1e-12)


def test_concat_pairs() -> None:
    """Test that pair rows are [reference, target] embeddings side by side."""
    x = _embeddings(batch=1)
    joined = relhead.concat_pairs(x, np.array([[3, 1]]))
    expected = np.concatenate([x.data[0, 3], x.data[0, 1]])
    np.testing.assert_array_equal(joined.data[0, 0], expected)


# fmt: off
@pytest.mark.parametrize(
    "pairs",
    [[[0, 0]], [[0, 5]], [[-1, 2]]]
)
# fmt: on
def test_concat_pairs_validation(pairs: list) -> None:
    """Test that self pairs and out of range indices raise a GeometryError."""
    with pytest.raises(GeometryError):
        relhead.concat_pairs(_embeddings(), np.array(pairs))


def test_full_mlp_fixed_length() -> None:
    """Test that the full MLP head only accepts the patch count it was built for."""
    head = relhead.FullMLPHead(_PATCHES, _WIDTH, 2, np.random.default_rng(0), np.float64)
    x = Tensor(np.zeros((1, _PATCHES + 1, _WIDTH)))
    with pytest.raises(ConfigurationError):
        head(x, np.array([[0, 1]]))


@pytest.mark.parametrize("heads, projections", [(1, False), (2, True)])
def test_cross_attention_permutation(heads: int, projections: bool) -> None:
    """Test that permuting the patches and relabeling the pairs keeps predictions."""
    config = HeadConfig(heads=heads, projections=projections)
    head = relhead.CrossAttentionHead(_WIDTH, 2, config, np.random.default_rng(0))
    x = _embeddings()
    pairs = np.array([[0, 1], [4, 2], [3, 0], [2, 3]])
    order = np.array([3, 0, 4, 1, 2])
    moved = Tensor(x.data[:, order])
    relabeled = np.argsort(order)[pairs]
    np.testing.assert_allclose(
        head(moved, relabeled).data, head(x, pairs).data, rtol=0.0, atol=1e-10
    )


def test_pairwise_mlp_locality() -> None:
    """Test that patches outside every selected pair do not affect the predictions."""
    head = relhead.PairwiseMLPHead(_WIDTH, 2, np.random.default_rng(0), np.float64)
    x = _embeddings()
    pairs = np.array([[0, 1], [3, 0], [1, 3]])
    before = head(x, pairs).data
    perturbed = x.data.copy()
    perturbed[:, [2, 4]] += np.random.default_rng(5).normal(size=(2, 2, _WIDTH))
    np.testing.assert_array_equal(head(Tensor(perturbed), pairs).data, before)
    joined = relhead.concat_pairs(Tensor(perturbed), pairs).data
    np.testing.assert_array_equal(joined, relhead.concat_pairs(x, pairs).data)


def test_full_mlp_parameter_count() -> None:
    """Test the weight count N*d * N^2 * arity of a full MLP head."""
    head = relhead.FullMLPHead(16, 32, 2, np.random.default_rng(0), np.float64)
    assert head.projection.weight.size == 16 * 32 * 256 * 2 == 262144
    assert head.parameter_count() == 262144 + 256 * 2


def test_single_head_cross_attention() -> None:
    """Test that one head is plain scaled dot-product attention."""
    rng = np.random.default_rng(0)
    query, key = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4))
    out = relhead.cross_attend(Tensor(query), Tensor(key), Tensor(key)).data
    scores = query[0] @ key[0].T / 2.0
    weights = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out[0], weights @ key[0])


def test_multi_head_cross_attention() -> None:
    """Test that heads attend over their own slice of the width."""
    rng = np.random.default_rng(0)
    query, key = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4))
    out = relhead.cross_attend(Tensor(query), Tensor(key), Tensor(key), heads=2).data
    for half in (slice(0, 2), slice(2, 4)):
        single = relhead.cross_attend(
            Tensor(query[..., half]), Tensor(key[..., half]), Tensor(key[..., half])
        )
        np.testing.assert_allclose(out[..., half], single.data)


def test_pretrain_loss_decomposes() -> None:
    """Test that the loss is the mean of the per-coordinate mean squared errors."""
    rng = np.random.default_rng(0)
    pred, truth = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 6, 2))
    loss = relhead.pretrain_loss(Tensor(pred), truth).item()
    per_coordinate = ((pred - truth) ** 2).reshape(-1, 2).mean(axis=0)
    assert loss == pytest.approx(per_coordinate.mean())


def test_standardize() -> None:
    """Test that standardized targets have zero mean and unit variance per coordinate."""
    targets = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 16, 2))
    flat = relhead.standardize(targets).reshape(-1, 2)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(flat.std(axis=0), 1.0)


def test_standardize_constant_coordinate() -> None:
    """Test that a constant coordinate is centered rather than divided by zero."""
    targets = np.zeros((1, 3, 2))
    targets[..., 0] = [1.0, 2.0, 3.0]
    assert np.all(np.isfinite(relhead.standardize(targets)))


def test_head_gradients(head: Module) -> None:
    """Test each head composed with the loss against finite differences."""
    rng = np.random.default_rng(2)
    for parameter in head.parameters():
        parameter.data = rng.normal(0.0, 0.3, parameter.shape)
    x = Parameter(rng.normal(size=(1, _PATCHES, _WIDTH)))
    pairs = np.array([[0, 1], [2, 4], [3, 0], [4, 1]])
    truth = rng.normal(size=(1, 4, 2))

    def loss() -> Tensor:
        return relhead.pretrain_loss(head(x, pairs), truth)

    assert kernel.grad_check(loss, [x, *head.parameters()], rng=rng) <= 1e-5
