""" Parameter containers and the two layers every model here is assembled from. """
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ShapeError
from .tensor import Parameter, Tensor, layernorm, linear

_INIT_STD = 0.02


class Module:
    """Base class of anything that owns parameters.

    Parameters are discovered from instance attributes: `Parameter` values,
      nested `Module` values and lists of modules. Their dotted attribute path is
      the parameter name used in checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attribute, value in vars(self).items():
            path = f"{prefix}{attribute}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{index}.")

    def parameters(self) -> List[Parameter]:
        return [parameter for _, parameter in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [parameter for parameter in self.parameters() if parameter.requires_grad]

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.zero_grad()

    def freeze(self) -> None:
        """Stop gradients from accumulating into every parameter of this module."""
        for parameter in self.parameters():
            parameter.requires_grad = False

    def parameter_count(self) -> int:
        return sum(parameter.size for parameter in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: parameter.data for name, parameter in self.named_parameters()}

    def load_state_dict(
        self, state: Dict[str, np.ndarray], strict: bool = True
    ) -> List[str]:
        """Copy values into the parameters of this module.

        Args:
            state: Mapping from parameter name to array.
            strict: Whether every parameter of this module must be present in `state`.

        Returns:
            Names of parameters that were not found in `state` (only when not strict).

        Raises:
            ShapeError: If a stored array does not match the parameter shape, or a
                parameter is missing in strict mode.
        """
        missing = []
        for name, parameter in self.named_parameters():
            if name not in state:
                if strict:
                    raise ShapeError(f"Parameter {name} is missing from the state")
                missing.append(name)
                continue
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ShapeError(
                    f"Parameter {name} has shape {parameter.shape} but the state holds "
                    f"{value.shape}"
                )
            parameter.data = np.ascontiguousarray(value.astype(parameter.dtype))
        return missing


class Linear(Module):
    """Affine map along the last axis, weight stored as (in, out)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        dtype: type = np.float64,
    ):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), dtype))
        self.bias: Optional[Parameter] = (
            Parameter(np.zeros(out_features, dtype=dtype)) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, features: int, epsilon: float = 1e-6, dtype: type = np.float64):
        self.gain = Parameter(np.ones(features, dtype=dtype))
        self.shift = Parameter(np.zeros(features, dtype=dtype))
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.shift, self.epsilon)


def trunc_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], dtype: type = np.float64
) -> np.ndarray:
    """Normal samples with std 0.02, redrawn until they lie within two deviations."""
    values = rng.normal(0.0, _INIT_STD, size=shape)
    outside = np.abs(values) > 2 * _INIT_STD
    while np.any(outside):
        values[outside] = rng.normal(0.0, _INIT_STD, size=int(outside.sum()))
        outside = np.abs(values) > 2 * _INIT_STD
    return values.astype(dtype)
