"""AdamW, the EMA target update and the schedules that drive them."""

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from gaze_world.numcore import GradientError, ShapeError, Tensor

_logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.04
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "step": self.step,
        }


def adamw_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place.

    Gradients come from ``grads`` when given, otherwise from each
    parameter's ``grad`` buffer.

    Examples:
        >>> p = {"w": Tensor([1.0])}
        >>> s = adamw_step(OptimizerState(lr=0.1, weight_decay=0.0), p, {"w": np.array([1.0])})
        >>> round(float(p["w"].data[0]), 6)
        0.9
        >>> s.step
        1
    """
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise GradientError(f"parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise ShapeError(f"gradient of {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.exp_avg.setdefault(name, np.zeros_like(p.data))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


def ema_update(
    target_params: Mapping[str, Tensor], online_params: Mapping[str, Tensor], tau: float
) -> None:
    """``target <- tau * target + (1 - tau) * online``, outside any graph.

    Examples:
        >>> t, o = {"w": Tensor([2.0])}, {"w": Tensor([1.0])}
        >>> ema_update(t, o, 0.998)
        >>> round(float(t["w"].data[0]), 12)
        1.998
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if list(target_params) != list(online_params):
        raise ShapeError("target and online parameter sets differ")
    for name, target in target_params.items():
        online = online_params[name]
        if target.shape != online.shape:
            raise ShapeError(f"{name!r}: target {target.shape} vs online {online.shape}")
        target.data *= tau
        target.data += (1.0 - tau) * online.data


def ema_schedule(step: int, total: int, start: float = 0.998, end: float = 1.0) -> float:
    """Cosine ramp of the EMA momentum from ``start`` (step 0) to ``end`` (step total).

    Examples:
        >>> ema_schedule(0, 10), ema_schedule(10, 10)
        (0.998, 1.0)
        >>> round(ema_schedule(5, 10), 12)
        0.999
        >>> ema_schedule(11, 10)
        Traceback (most recent call last):
        ...
        gaze_world.optim.ScheduleError: step 11 lies outside [0, 10]
    """
    if total < 1 or not 0 <= step <= total:
        raise ScheduleError(f"step {step} lies outside [0, {total}]")
    if step == 0:
        return start
    if step == total:
        return end
    return end - (end - start) * (1.0 + math.cos(math.pi * step / total)) / 2.0


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` down to ``lr_min``.

    Examples:
        >>> round(cosine_lr(0, 30, 5e-4, 1e-6), 12), round(cosine_lr(30, 30, 5e-4, 1e-6), 12)
        (0.0005, 1e-06)
    """
    if total <= 0:
        return lr_max
    step = min(max(step, 0), total)
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total)) / 2.0
