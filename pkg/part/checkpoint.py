""" Checkpoint files: configuration, parameters, optimizer moments and training state.

Layout (all integers little-endian):

    magic           8 bytes   b"PARTCKPT"
    version         u32
    header length   u64
    header          UTF-8 JSON
    payload         float64 tensors, in the order the header lists them

The header is self-describing: it names every tensor with its shape, so a file
  can be inspected without knowing the model that wrote it.
"""
import json
import logging
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .definitions import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _UTF8
from .errors import InvalidCheckpointError

log = logging.getLogger(__name__)

_FilePath = Union[str, Path]
_FLOAT = np.dtype("<f8")
_U32 = np.dtype("<u4")
_U64 = np.dtype("<u8")


@dataclass
class Checkpoint:
    # noinspection PyUnresolvedReferences
    """Everything needed to rebuild a model and continue training it.

    Args:
        kind: "pretrain", "finetune" or "probe".
        config: The effective run configuration as a JSON-compatible mapping.
        meta: Build facts not contained in the configuration (image dims, target
            arity, patch count, class count, position table rows).
        parameters: Parameter arrays by dotted name.
        moments: Optimizer moment arrays by `first.<name>` / `second.<name>`.
        step: Optimizer steps taken.
        seed: Seed of the run; with `step` it determines every following batch.
    """
    kind: str
    config: Dict[str, Any]
    meta: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def header(self) -> Dict[str, Any]:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "meta": self.meta,
            "step": self.step,
            "rng": {"seed": self.seed, "next_step": self.step},
            "tensors": [
                {"group": group, "name": name, "shape": list(array.shape)}
                for group, tensors in self._groups()
                for name, array in tensors.items()
            ],
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode(_UTF8)
        buffer = BytesIO()
        buffer.write(CHECKPOINT_MAGIC)
        buffer.write(np.array(CHECKPOINT_VERSION, dtype=_U32).tobytes())
        buffer.write(np.array(len(header), dtype=_U64).tobytes())
        buffer.write(header)
        for _, tensors in self._groups():
            for array in tensors.values():
                buffer.write(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())
        return buffer.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        """Parse a checkpoint.

        Raises:
            InvalidCheckpointError: If the magic bytes, version or header are wrong, or
                the payload is truncated or has trailing bytes.
        """
        buffered_data = BytesIO(data)
        magic = buffered_data.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InvalidCheckpointError(
                f"Checkpoints must start with {CHECKPOINT_MAGIC!r}. Found: {magic!r}"
            )
        version = _read_int(buffered_data, _U32)
        if version != CHECKPOINT_VERSION:
            raise InvalidCheckpointError(
                f"Unsupported checkpoint version {version}; "
                f"this build reads version {CHECKPOINT_VERSION}"
            )
        length = _read_int(buffered_data, _U64)
        raw_header = buffered_data.read(length)
        if len(raw_header) != length:
            raise InvalidCheckpointError("Checkpoint header is truncated")
        try:
            header = json.loads(raw_header.decode(_UTF8))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise InvalidCheckpointError(f"Checkpoint header is not valid JSON: {err}")

        groups: Dict[str, Dict[str, np.ndarray]] = {"parameters": {}, "moments": {}}
        try:
            for entry in header["tensors"]:
                shape = tuple(int(size) for size in entry["shape"])
                count = int(np.prod(shape, dtype=np.int64))
                payload = buffered_data.read(count * _FLOAT.itemsize)
                if len(payload) != count * _FLOAT.itemsize:
                    raise InvalidCheckpointError(
                        f"Checkpoint payload for {entry['name']} is truncated"
                    )
                array = np.frombuffer(payload, dtype=_FLOAT).reshape(shape)
                groups[entry["group"]][entry["name"]] = array.astype(np.float64)
            checkpoint = cls(
                kind=header["kind"],
                config=header["config"],
                meta=header["meta"],
                parameters=groups["parameters"],
                moments=groups["moments"],
                step=int(header["step"]),
                seed=int(header["rng"]["seed"]),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise InvalidCheckpointError(f"Checkpoint header is incomplete: {err!r}")
        if buffered_data.read(1):
            raise InvalidCheckpointError("Checkpoint has trailing bytes after the payload")
        return checkpoint

    def save(self, path: _FilePath) -> None:
        Path(path).write_bytes(self.to_bytes())
        log.info("Wrote checkpoint %s (step %d)", path, self.step)

    @classmethod
    def load(cls, path: _FilePath) -> "Checkpoint":
        """Read a checkpoint file.

        Raises:
            FileNotFoundError: If the file does not exist.
            InvalidCheckpointError: If the file is not a valid checkpoint.
        """
        return cls.from_bytes(Path(path).read_bytes())

    def tensor_names(self) -> List[str]:
        return [entry["name"] for entry in self.header()["tensors"]]

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact comparison of every field."""
        if self.header() != other.header():
            return False
        return all(
            np.array_equal(array, other_tensors[name])
            for (_, tensors), (_, other_tensors) in zip(self._groups(), other._groups())
            for name, array in tensors.items()
        )

    def _groups(self) -> List[tuple]:
        return [("parameters", self.parameters), ("moments", self.moments)]


def _read_int(buffered_data: BytesIO, dtype: np.dtype) -> int:
    raw = buffered_data.read(dtype.itemsize)
    if len(raw) != dtype.itemsize:
        raise InvalidCheckpointError("Checkpoint preamble is truncated")
    return int(np.frombuffer(raw, dtype=dtype)[0])
