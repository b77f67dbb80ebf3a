""" Tests for part/dataio.py """
import warnings
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from part import dataio
from part.dataio import SceneKind, SceneSpec, SignalSpec
from part.errors import (
    ConfigurationError,
    InvalidDatasetError,
    ShapeError,
    ZeroVarianceWarning,
)
from part.geometry import ImageDims


@pytest.fixture(name="scenes", params=list(SceneKind))
def _scenes(request: Any) -> dataio.SceneDataset:
    spec = SceneSpec(
        height=16,
        width=24,
        kind=request.param,
        shape_size=4,
        offset_x=8,
        offset_y=4,
        jitter=1,
        labeled=True,
        seed=5,
    )
    return dataio.generate_scenes(spec, 6)


def _centroid(image: np.ndarray, value: float) -> np.ndarray:
    rows, columns = np.nonzero(np.isclose(image[..., 0], value))
    return np.array([columns.mean(), rows.mean()])


def test_scene_shape_and_range(scenes: dataio.SceneDataset) -> None:
    """Test that scenes have the configured dims and values in [0, 1]."""
    for index in range(len(scenes)):
        sample = scenes[index]
        assert sample.data.shape == (16, 24, 3)
        assert 0.0 <= sample.data.min() and sample.data.max() <= 1.0
        assert sample.label == index % 2


def test_scenes_are_pure(scenes: dataio.SceneDataset) -> None:
    """Test that an item depends only on the generator settings and its index."""
    again = dataio.generate_scenes(scenes.spec, 6)
    for index in range(len(scenes)):
        np.testing.assert_array_equal(scenes[index].data, again[index].data)
    if scenes.spec.kind is not SceneKind.STRIPES:
        assert not np.array_equal(scenes[0].data, scenes[2].data)


def test_scene_ranges_do_not_overlap() -> None:
    """Test that a dataset starting later continues the index sequence."""
    spec = SceneSpec(seed=1)
    train = dataio.generate_scenes(spec, 4)
    validation = dataio.generate_scenes(spec, 2, start=4)
    np.testing.assert_array_equal(validation[0].data, dataio.generate_scene(spec, 4).data)
    assert not np.array_equal(validation[0].data, train[0].data)


def test_gradient_scene_is_a_ramp() -> None:
    """Test that gradient scenes are constant along rows and monotone down columns."""
    spec = SceneSpec(kind=SceneKind.GRADIENT, labeled=True)
    rising = dataio.generate_scene(spec, 0).data
    falling = dataio.generate_scene(spec, 1).data
    assert np.all(rising == rising[:, :1])
    assert np.all(np.diff(rising[:, 0], axis=0) > 0)
    assert np.all(np.diff(falling[:, 0], axis=0) < 0)


# fmt: off
@pytest.mark.parametrize(
    "index, expected",
    [(0, (12, 6)), (1, (-12, 6))]
)
# fmt: on
def test_two_shape_offset(index: int, expected: tuple) -> None:
    """Test the centroid offset between the two shapes, mirrored by the label."""
    spec = SceneSpec(channels=1, jitter=0, labeled=True)
    image = dataio.generate_scene(spec, index).data
    first = np.mean(spec.palette[1])
    second = np.mean(spec.palette[2])
    offset = _centroid(image, second) - _centroid(image, first)
    np.testing.assert_allclose(offset, expected)


def test_stripes_orientation() -> None:
    """Test that unlabeled stripes run along columns."""
    image = dataio.generate_scene(SceneSpec(kind=SceneKind.STRIPES, seed=2), 0).data
    assert np.all(image == image[:1])


# fmt: off
@pytest.mark.parametrize(
    "kwargs",
    [{"channels": 2},
     {"height": 0},
     {"shape_size": 10, "offset_x": 25},
     {"palette": [(0, 0, 0)]},
     {"kind": "checkerboard"}]
)
# fmt: on
def test_scene_spec_validation(kwargs: dict) -> None:
    """Test that impossible scene specs are rejected."""
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_dataset_index_errors() -> None:
    """Test negative counts and out of range indices."""
    with pytest.raises(ConfigurationError):
        dataio.generate_scenes(SceneSpec(), -1)
    with pytest.raises(IndexError):
        dataio.generate_scenes(SceneSpec(), 2)[2]


def test_signal_properties() -> None:
    """Test that recordings are normalized per channel and labeled by stage."""
    spec = SignalSpec(length=500, channels=2, labeled=True, seed=3)
    signals = dataio.generate_signals(spec, 5)
    assert signals.dims == ImageDims(1, 500, 2)
    assert signals.num_classes == 5
    for index in range(5):
        sample = signals[index]
        assert sample.data.shape == (1, 500, 2)
        assert sample.label == index
        np.testing.assert_allclose(sample.data[0].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(sample.data[0].std(axis=0), 1.0)


def test_signal_emphasis() -> None:
    """Test that the labeled component carries the most power."""
    spec = SignalSpec(length=3000, sample_rate=100.0, labeled=True, noise=0.05, seed=1)
    frequencies = np.fft.rfftfreq(spec.length, 1.0 / spec.sample_rate)
    for index in range(len(spec.frequencies)):
        signal = dataio.generate_signal(spec, index).data[0, :, 0]
        spectrum = np.abs(np.fft.rfft(signal)) ** 2
        power = [
            spectrum[np.abs(frequencies - frequency) <= 0.1].sum()
            for frequency in spec.frequencies
        ]
        assert int(np.argmax(power)) == index


def test_signal_spec_validation() -> None:
    """Test that misaligned components are rejected."""
    with pytest.raises(ConfigurationError):
        SignalSpec(frequencies=(1.0, 2.0), amplitudes=(1.0,))


def test_instance_normalize() -> None:
    """Test zero mean, unit variance and invariance to affine rescaling."""
    window = np.random.default_rng(0).normal(size=(20, 3))
    normalized, flagged = dataio.instance_normalize(window)
    assert not flagged
    np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalized.std(axis=0), 1.0)
    rescaled, _ = dataio.instance_normalize(7.5 * window - 3.0)
    np.testing.assert_allclose(rescaled, normalized, atol=1e-12)


def test_instance_normalize_constant_window() -> None:
    """Test that a constant channel becomes zeros with a warning."""
    window = np.stack([np.full(8, 4.0), np.arange(8.0)], axis=1)
    with pytest.warns(ZeroVarianceWarning):
        normalized, flagged = dataio.instance_normalize(window)
    assert flagged
    np.testing.assert_array_equal(normalized[:, 0], 0.0)
    assert np.all(np.isfinite(normalized))


def test_instance_normalize_warning_toggle() -> None:
    """Test that the warning can be switched off."""
    with warnings.catch_warnings(record=True) as record:
        warnings.simplefilter("always")
        _, flagged = dataio.instance_normalize(np.ones(5), warn=False)
    assert flagged and not record


def test_instance_normalize_needs_two_samples() -> None:
    """Test that a one-sample window cannot be normalized."""
    with pytest.raises(ShapeError):
        dataio.instance_normalize(np.ones((1, 2)))


def test_raw_image_round_trip(tmp_path: Path) -> None:
    """Test that raw image files hold quantized pixels and labels losslessly."""
    spec = SceneSpec(
        height=8, width=12, shape_size=3, offset_x=4, offset_y=2, jitter=1, labeled=True
    )
    scenes = dataio.generate_scenes(spec, 5)
    path = tmp_path / "images.bin"
    dataio.write_raw_images(path, scenes)
    assert path.stat().st_size == 5 * (1 + 8 * 12 * 3)
    loaded = dataio.load_raw_images(path, spec.dims)
    assert len(loaded) == 5
    np.testing.assert_array_equal(loaded.labels(), [0, 1, 0, 1, 0])
    for index in range(5):
        expected = np.rint(scenes[index].data * 255) / 255
        np.testing.assert_allclose(loaded[index].data, expected)
    again = tmp_path / "again.bin"
    dataio.write_raw_images(again, loaded)
    assert again.read_bytes() == path.read_bytes()


def test_raw_image_layout(tmp_path: Path) -> None:
    """Test that records are a label byte followed by channel-planar pixels."""
    image = np.zeros((1, 2, 3))
    image[0, 1] = [1.0, 0.0, 1.0]
    path = tmp_path / "one.bin"
    dataio.write_raw_images(path, dataio.ArrayDataset(image[None], np.array([7])))
    assert path.read_bytes() == bytes([7, 0, 255, 0, 0, 0, 255])


def test_raw_image_bad_length(tmp_path: Path) -> None:
    """Test that a partial record is a malformed file."""
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(1 + 4 * 4 + 3))
    with pytest.raises(InvalidDatasetError):
        dataio.load_raw_images(path, ImageDims(4, 4, 1))


def test_raw_image_empty(tmp_path: Path) -> None:
    """Test that an empty file is an empty dataset."""
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(dataio.load_raw_images(path, ImageDims(4, 4, 1))) == 0


def test_raw_signal_round_trip(tmp_path: Path) -> None:
    """Test that raw signal files store float64 samples exactly."""
    spec = SignalSpec(length=64, channels=2, labeled=True, seed=4)
    signals = dataio.generate_signals(spec, 3)
    path = tmp_path / "signals.bin"
    dataio.write_raw_signals(path, signals)
    loaded = dataio.load_raw_signals(path, 64, 2)
    for index in range(3):
        np.testing.assert_array_equal(loaded[index].data, signals[index].data)
        assert loaded[index].label == signals[index].label
    with pytest.raises(InvalidDatasetError):
        dataio.load_raw_signals(path, 63, 2)


def test_subset() -> None:
    """Test contiguous slices and their bounds."""
    scenes = dataio.generate_scenes(SceneSpec(), 5)
    subset = dataio.Subset(scenes, 2, 3)
    np.testing.assert_array_equal(subset[0].data, scenes[2].data)
    with pytest.raises(ConfigurationError):
        dataio.Subset(scenes, 3, 3)


@pytest.mark.parametrize("channels, magic", [(1, b"P5"), (3, b"P6")])
def test_pnm_round_trip(tmp_path: Path, channels: int, magic: bytes) -> None:
    """Test that PGM and PPM files hold the quantized image."""
    image = np.random.default_rng(0).random((5, 7, channels))
    path = tmp_path / "canvas.pnm"
    dataio.write_pnm(path, image)
    assert path.read_bytes().startswith(magic + b"\n7 5\n255\n")
    np.testing.assert_allclose(dataio.read_pnm(path), np.rint(image * 255) / 255)


def test_pnm_channels(tmp_path: Path) -> None:
    """Test that only gray and RGB images can be written."""
    with pytest.raises(ShapeError):
        dataio.write_pnm(tmp_path / "bad.pnm", np.zeros((2, 2, 2)))
