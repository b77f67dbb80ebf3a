""" Tests for part/checkpoint.py """
from pathlib import Path

import numpy as np
import pytest

from part.checkpoint import Checkpoint
from part.definitions import CHECKPOINT_MAGIC
from part.errors import InvalidCheckpointError


@pytest.fixture(name="checkpoint")
def _checkpoint() -> Checkpoint:
    rng = np.random.default_rng(0)
    return Checkpoint(
        kind="pretrain",
        config={"model": {"embed_dim": 8}, "train": {"seed": 3}},
        meta={"dims": [8, 8, 1], "patch_count": 4},
        parameters={"trunk.w": rng.normal(size=(2, 3)), "head.b": rng.normal(size=4)},
        moments={"first.trunk.w": rng.normal(size=(2, 3))},
        step=17,
        seed=3,
    )


def test_round_trip(checkpoint: Checkpoint, tmp_path: Path) -> None:
    """Test that a saved checkpoint loads back bit for bit."""
    path = tmp_path / "ckpt_17.part"
    checkpoint.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.equals(checkpoint)
    assert loaded.step == 17 and loaded.seed == 3
    assert loaded.to_bytes() == path.read_bytes()


def test_header_describes_tensors(checkpoint: Checkpoint) -> None:
    """Test that the header lists every tensor with its shape and the RNG state."""
    header = checkpoint.header()
    assert header["tensors"] == [
        {"group": "parameters", "name": "trunk.w", "shape": [2, 3]},
        {"group": "parameters", "name": "head.b", "shape": [4]},
        {"group": "moments", "name": "first.trunk.w", "shape": [2, 3]},
    ]
    assert header["rng"] == {"seed": 3, "next_step": 17}
    assert checkpoint.tensor_names() == ["trunk.w", "head.b", "first.trunk.w"]


def test_equals_detects_changes(checkpoint: Checkpoint) -> None:
    """Test that a single changed value breaks equality."""
    other = Checkpoint.from_bytes(checkpoint.to_bytes())
    other.parameters["head.b"] = other.parameters["head.b"].copy()
    other.parameters["head.b"][0] += 1e-12
    assert not other.equals(checkpoint)


def test_bad_magic(checkpoint: Checkpoint) -> None:
    """Test that a file with foreign magic bytes is refused."""
    data = checkpoint.to_bytes()
    with pytest.raises(InvalidCheckpointError):
        Checkpoint.from_bytes(b"NOTACKPT" + data[len(CHECKPOINT_MAGIC) :])


def test_bad_version(checkpoint: Checkpoint) -> None:
    """Test that an unknown format version is refused."""
    data = bytearray(checkpoint.to_bytes())
    data[len(CHECKPOINT_MAGIC)] = 99
    with pytest.raises(InvalidCheckpointError):
        Checkpoint.from_bytes(bytes(data))


@pytest.mark.parametrize("end", [4, 10, 20, -8, -30])
def test_truncated(checkpoint: Checkpoint, end: int) -> None:
    """Test that a file cut short anywhere is refused."""
    data = checkpoint.to_bytes()
    with pytest.raises(InvalidCheckpointError):
        Checkpoint.from_bytes(data[:end])


def test_trailing_bytes(checkpoint: Checkpoint) -> None:
    """Test that bytes after the payload are refused."""
    with pytest.raises(InvalidCheckpointError):
        Checkpoint.from_bytes(checkpoint.to_bytes() + b"\x00")


def test_missing_file(tmp_path: Path) -> None:
    """Test that a missing checkpoint raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.part")
