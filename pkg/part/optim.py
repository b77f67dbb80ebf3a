""" Decoupled-weight-decay Adam and the learning rate schedule. """
import math
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .kernel import Parameter


class Schedule(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


def learning_rate(
    step: int, base: float, steps: int, warmup_steps: int, schedule: Schedule
) -> float:
    """Learning rate of optimizer step `step` (counting from 0).

    The rate rises linearly from `base / warmup_steps` to `base` over the warmup
      steps. Afterwards it either stays at `base` or follows a half cosine down to
      zero at `steps`.
    """
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    if Schedule(schedule) is Schedule.CONSTANT:
        return base
    progress = (step - warmup_steps) / max(1, steps - warmup_steps)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class AdamW:
    """Adam with weight decay applied directly to the weights.

    Decay only touches parameters with two or more dimensions, so biases and
      normalization gains are left alone. Frozen parameters are skipped entirely.

    Args:
        named: (name, parameter) pairs, e.g. `module.named_parameters()`.
        betas: Decay rates of the first and second moment estimates.
        weight_decay: Decoupled decay coefficient, multiplied by the learning rate.
        epsilon: Added to the root of the second moment.
    """

    def __init__(
        self,
        named: Sequence[Tuple[str, Parameter]],
        betas: Tuple[float, float] = (0.9, 0.95),
        weight_decay: float = 0.05,
        epsilon: float = 1e-8,
    ):
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ConfigurationError(f"Adam betas must lie in [0, 1). Found: {betas}")
        if weight_decay < 0:
            raise ConfigurationError(
                f"train.weight_decay must be non-negative. Found: {weight_decay}"
            )
        self.named: List[Tuple[str, Parameter]] = list(named)
        self.betas = betas
        self.weight_decay = weight_decay
        self.epsilon = epsilon
        self.steps = 0
        self.first = {name: np.zeros_like(param.data) for name, param in self.named}
        self.second = {name: np.zeros_like(param.data) for name, param in self.named}

    def zero_grad(self) -> None:
        for _, param in self.named:
            param.zero_grad()

    def step(self, rate: float) -> None:
        """Apply one update with learning rate `rate` using the accumulated gradients."""
        self.steps += 1
        beta1, beta2 = self.betas
        first_correction = 1.0 - beta1**self.steps
        second_correction = 1.0 - beta2**self.steps
        for name, param in self.named:
            if not param.requires_grad:
                continue
            grad = param.grad
            first, second = self.first[name], self.second[name]
            first *= beta1
            first += (1.0 - beta1) * grad
            second *= beta2
            second += (1.0 - beta2) * grad * grad
            if param.ndim >= 2 and self.weight_decay:
                param.data -= rate * self.weight_decay * param.data
            update = (first / first_correction) / (
                np.sqrt(second / second_correction) + self.epsilon
            )
            param.data -= (rate * update).astype(param.dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Moment estimates keyed `first.<name>` and `second.<name>`."""
        state = {f"first.{name}": value for name, value in self.first.items()}
        state.update({f"second.{name}": value for name, value in self.second.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], steps: int) -> None:
        """Restore moment estimates and the bias-correction step counter.

        Raises:
            ShapeError: If a moment is missing or its shape differs from the parameter.
        """
        for name, param in self.named:
            for prefix, moments in (("first", self.first), ("second", self.second)):
                key = f"{prefix}.{name}"
                if key not in state:
                    raise ShapeError(f"Optimizer state {key} is missing")
                value = np.asarray(state[key])
                if value.shape != param.shape:
                    raise ShapeError(
                        f"Optimizer state {key} has shape {value.shape}, "
                        f"expected {param.shape}"
                    )
                moments[name] = value.astype(param.dtype)
        self.steps = steps
