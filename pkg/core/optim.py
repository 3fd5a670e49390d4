# polarseg/core/optim.py
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Set

import numpy as np
from pydantic import BaseModel, Field

from core.errors import InputValidationError, ShapeMismatchError
from core.tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float,
              weight_decay: float = 1e-4, decay_names: Optional[Set[str]] = None) -> AdamState:
    """
    One bias-corrected Adam update in place. Weight decay is an L2 term added to the
    gradient before the moments, applied only to names in decay_names (all when None).
    Parameters without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeMismatchError(f"adam_step: gradient of '{name}' has shape {grad.shape}, expected {param.shape}",
                                     details={"param": name})
        if weight_decay and (decay_names is None or name in decay_names):
            grad = grad + weight_decay * param.data
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class CosineSchedule(BaseModel):
    """Cosine annealing from lr_initial down to lr_initial * floor_fraction."""
    lr_initial: float = Field(4e-4, ge=0, description="Learning rate at step 0.")
    floor_fraction: float = Field(2.5e-3, ge=0, le=1, description="Final rate as a fraction of lr_initial.")
    total_steps: int = Field(..., ge=1, description="Step at which the floor is reached.")

    @property
    def lr_floor(self) -> float:
        return self.lr_initial * self.floor_fraction


def cosine_lr(step: int, schedule: CosineSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise InputValidationError(f"cosine_lr: step {step} outside [0, {schedule.total_steps}]")
    lr_floor = schedule.lr_floor
    return lr_floor + (schedule.lr_initial - lr_floor) * (1.0 + math.cos(math.pi * step / schedule.total_steps)) / 2.0
