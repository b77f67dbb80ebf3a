""" Finite-difference verification of analytic gradients. """
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, NumericError
from .tensor import Parameter, Tape, Tensor

_MIN_DENOMINATOR = 1e-8


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    samples: int = 200,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare tape gradients against central differences.

    For every parameter, up to `samples` coordinates are drawn at random (all of
      them when the parameter is smaller) and the derivative is estimated as
      `(f(p + h) - f(p - h)) / 2h`. The loss closure must be deterministic.

    Args:
        loss_fn: Recomputes the scalar loss from the current parameter values.
        params: The parameters to check; must be 64-bit.
        step: Finite-difference step h, within [1e-6, 1e-4].
        samples: Coordinates checked per parameter.
        rng: Draws the coordinate subsample.

    Returns:
        The largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` seen,
          0.0 when there is nothing to check.

    Raises:
        ConfigurationError: If the step is out of range or a parameter is not 64-bit.
        NumericError: If the loss is not finite at a perturbed point.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ConfigurationError(
            f"Gradient check step must lie in [1e-6, 1e-4]. Found: {step}"
        )
    for parameter in params:
        if parameter.dtype != np.float64:
            raise ConfigurationError(
                f"Gradient checks need 64-bit parameters. "
                f"{parameter.name} is {parameter.dtype}"
            )
    if not params:
        return 0.0
    rng = rng if rng is not None else np.random.default_rng(0)

    for parameter in params:
        parameter.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [parameter.grad.reshape(-1).copy() for parameter in params]

    worst = 0.0
    for parameter, gradient in zip(params, analytic):
        flat = parameter.data.reshape(-1)
        if flat.size <= samples:
            coordinates = np.arange(flat.size)
        else:
            coordinates = rng.choice(flat.size, size=samples, replace=False)
        for coordinate in coordinates:
            original = flat[coordinate]
            flat[coordinate] = original + step
            plus = _evaluate(loss_fn, parameter.name)
            flat[coordinate] = original - step
            minus = _evaluate(loss_fn, parameter.name)
            flat[coordinate] = original
            numeric = (plus - minus) / (2 * step)
            error = abs(gradient[coordinate] - numeric) / max(
                _MIN_DENOMINATOR, abs(gradient[coordinate]) + abs(numeric)
            )
            worst = max(worst, float(error))
    return worst


def _evaluate(loss_fn: Callable[[], Tensor], name: str) -> float:
    try:
        value = loss_fn().item()
    except NumericError as err:
        raise NumericError(f"Loss is not finite after perturbing {name}: {err}")
    if not np.isfinite(value):
        raise NumericError(f"Loss is not finite after perturbing {name}")
    return value
