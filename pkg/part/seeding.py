""" Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
  `(seed, stream, *indices)`. Philox is a counter-based 64-bit generator, so
  the stream for a given key is identical on every platform and a batch can be
  regenerated from its step number alone.
"""
import numpy as np


def generator(seed: int, stream: int, *indices: int) -> np.random.Generator:
    """Build the generator for one keyed stream.

    Args:
        seed: The run seed.
        stream: Purpose identifier (see `part.definitions.STREAM_*`).
        indices: Further keys, e.g. the step number or an image index.

    Raises:
        ValueError: If the seed or any index is negative.
    """
    if seed < 0 or any(index < 0 for index in indices):
        raise ValueError(
            f"Seeds and stream indices must be non-negative. Found: {seed}, {indices}"
        )
    entropy = [int(seed), int(stream), *(int(index) for index in indices)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
