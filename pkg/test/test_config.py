""" Tests for part/config.py """
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from part import config, dataio
from part.config import DataSource, RunConfig, TrainConfig, TrainMode
from part.errors import ConfigurationError
from part.geometry import SamplingMode
from part.relhead import HeadKind


def test_defaults() -> None:
    """Test the quoted defaults of the pretext task."""
    run = RunConfig()
    assert run.sampler.patch_size == run.model.patch_size == 4
    assert run.sampler.mode is SamplingMode.OFFGRID
    assert run.head.kind is HeadKind.CROSS_ATTENTION
    assert run.train.pair_count == 2048
    assert run.train.mode is TrainMode.PRETRAIN
    assert not run.model.use_positional
    assert run.train.dtype is np.float64


def test_dict_round_trip() -> None:
    """Test that the materialized configuration rebuilds an equal configuration."""
    run = RunConfig.from_dict({"head": {"kind": "full_mlp"}, "train": {"steps": 10}})
    assert RunConfig.from_dict(run.to_dict()) == run
    assert json.loads(json.dumps(run.to_dict())) == run.to_dict()


# fmt: off
@pytest.mark.parametrize(
    "data, key",
    [({"trian": {}}, "trian"),
     ({"train": {"learnig_rate": 1.0}}, "train.learnig_rate"),
     ({"data": {"scenes": {"colour": 1}}}, "data.scenes.colour")]
)
# fmt: on
def test_unknown_key(data: dict, key: str) -> None:
    """Test that misspelled keys are named with their dotted path."""
    with pytest.raises(ConfigurationError, match=key):
        RunConfig.from_dict(data)


# fmt: off
@pytest.mark.parametrize(
    "data",
    [{"train": {"learning_rate": 0.0}},
     {"train": {"schedule": "linear"}},
     {"train": {"warmup_steps": 50, "steps": 10}},
     {"data": {"source": "raw_images"}},
     {"data": {"source": "video"}},
     {"model": {"patch_size": 8}},
     {"model": {"use_positional": True}},
     {"train": "fast"}]
)
# fmt: on
def test_invalid_values(data: dict) -> None:
    """Test that invalid or inconsistent values raise a ConfigurationError."""
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(data)


def test_positions_allowed_for_finetuning() -> None:
    """Test that finetuning runs may use a position table."""
    run = RunConfig.from_dict(
        {"model": {"use_positional": True}, "train": {"mode": "finetune"}}
    )
    assert run.model.use_positional


def test_override_precedence(tmp_path: Path) -> None:
    """Test that dotted overrides win over the file, which wins over defaults."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"learning_rate": 0.01, "steps": 30}}))
    run = RunConfig.from_file(path, {"train.learning_rate": 0.02})
    assert run.train.learning_rate == 0.02
    assert run.train.steps == 30
    assert run.train.batch_size == TrainConfig().batch_size


def test_bad_config_file(tmp_path: Path) -> None:
    """Test that a file without a JSON object is refused."""
    path = tmp_path / "config.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        RunConfig.from_file(path)
    path.write_text("{")
    with pytest.raises(ConfigurationError):
        RunConfig.from_file(path)


def test_save_and_reload(tmp_path: Path) -> None:
    """Test that a saved effective configuration reproduces the run configuration."""
    run = RunConfig().replace({"sampler.size_max": 6, "train.seed": 9})
    path = tmp_path / "config.json"
    run.save(path)
    assert RunConfig.from_file(path) == run


def test_apply_overrides_section_path() -> None:
    """Test that an override cannot descend through a plain value."""
    with pytest.raises(ConfigurationError):
        config.apply_overrides({"out": "runs"}, {"out.name": 1})


# fmt: off
@pytest.mark.parametrize(
    "text, expected",
    [("3", 3), ("1e-3", 1e-3), ("true", True), ("null", None), ("[1, 2]", [1, 2]),
     ("cosine", "cosine")]
)
# fmt: on
def test_parse_value(text: str, expected: object) -> None:
    """Test that flag values are read as JSON with a string fallback."""
    assert config.parse_value(text) == expected


def test_warmup_default() -> None:
    """Test that warmup defaults to five percent of the steps."""
    assert TrainConfig(steps=200).warmup == 10
    assert TrainConfig(steps=200, warmup_steps=0).warmup == 0


def test_synthetic_splits_do_not_overlap() -> None:
    """Test that validation scenes continue after the training scenes."""
    data = config.DataConfig(train_count=3, validation_count=2)
    train, validation = config.load_datasets(data)
    assert (len(train), len(validation)) == (3, 2)
    np.testing.assert_array_equal(
        validation[0].data, dataio.generate_scene(data.scenes, 3).data
    )


def test_raw_splits(tmp_path: Path) -> None:
    """Test that raw files split into a head for training and a tail for validation."""
    spec = dataio.SceneSpec(
        height=8, width=8, channels=1, shape_size=2, offset_x=3, offset_y=2, labeled=True
    )
    path = tmp_path / "images.bin"
    dataio.write_raw_images(path, dataio.generate_scenes(spec, 5))
    sidecar = {"height": 8, "width": 8, "channels": 1}
    (tmp_path / "dataset.json").write_text(json.dumps(sidecar))
    data = config.DataConfig(
        source=DataSource.RAW_IMAGES, path=str(path), train_count=10, validation_count=2
    )
    train, validation = config.load_datasets(data)
    assert (len(train), len(validation)) == (3, 2)
    assert validation[0].label == 1
    with pytest.raises(ConfigurationError):
        config.load_datasets(dataclasses.replace(data, validation_count=6))


@pytest.mark.parametrize("kind", list(HeadKind))
@pytest.mark.parametrize("signal", [False, True])
def test_tiny_config(kind: HeadKind, signal: bool) -> None:
    """Test the smallest complete run configuration."""
    run = config.tiny_config(kind, signal=signal)
    assert run.head.kind is kind
    assert run.train.pair_count == 4 and run.sampler.patch_count == 4
    assert run.model.embed_dim == 16 and run.model.depth == 2
    assert run.data.dims.height == (1 if signal else 8)
