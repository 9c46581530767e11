"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .nn import Parameter
from .tensor import GradientUsageError


@dataclass
class OptimizerState:
    """Moment buffers keyed by parameter name; only trainable parameters get buffers."""
    base_lr: float
    weight_decay: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def create_optimizer_state(params: Iterable[Parameter], base_lr: float = 1e-4,
                           weight_decay: float = 0.01, total_steps: int = 1000) -> OptimizerState:
    """
    Zeroed AdamW moments for every trainable parameter.

    Args:
        params: Parameters of the model; frozen ones are skipped.
        base_lr: Peak learning rate of the cosine schedule.
        weight_decay: Decoupled weight decay.
        total_steps: Schedule length, recorded on the state.

    Returns:
        OptimizerState: Moments keyed by parameter name.

    Raises:
        GradientUsageError: If two trainable parameters share a name.
    """
    state = OptimizerState(base_lr=base_lr, weight_decay=weight_decay, total_steps=total_steps)
    for p in params:
        if p.frozen:
            continue
        if p.name in state.first_moment:
            raise GradientUsageError(f"duplicate parameter name '{p.name}'")
        state.first_moment[p.name] = np.zeros_like(p.data)
        state.second_moment[p.name] = np.zeros_like(p.data)
    return state


def adamw_step(state: OptimizerState, params: Iterable[Parameter], lr: Optional[float] = None) -> None:
    """
    Apply one AdamW update in place.

    Weight decay is decoupled: p <- p - lr * wd * p, then the bias-corrected Adam step.

    Args:
        state: Optimizer state created for these parameters.
        params: Parameters whose .grad is populated by backward.
        lr: Learning rate for this step; defaults to state.base_lr.

    Raises:
        GradientUsageError: If a trainable parameter has no gradient or no buffers.
    """
    lr = state.base_lr if lr is None else lr
    trainable = [p for p in params if not p.frozen]
    for p in trainable:
        if p.grad is None:
            raise GradientUsageError(f"trainable parameter '{p.name}' has no gradient")
        if p.name not in state.first_moment:
            raise GradientUsageError(f"parameter '{p.name}' is unknown to the optimizer")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p in trainable:
        m = state.first_moment[p.name]
        v = state.second_moment[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total)) for 0 <= step <= total."""
    if total < 1:
        raise GradientUsageError(f"total steps must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise GradientUsageError(f"step {step} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
