"""AdamW with decoupled weight decay and a cosine-decayed learning rate."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError
from .tensor import Tensor


def cosine_rate(step: int, total_steps: int, base_lr: float) -> float:
    """Learning rate at ``step`` of a cosine decay over ``total_steps``.

    ``rate(0) == base_lr``; the rate at the last executed step
    (``total_steps - 1``) is within a factor ``~(pi / (2 * total_steps))**2``
    of zero.
    """
    if total_steps <= 0:
        raise ContractError(f"cosine_rate: total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ContractError(f"cosine_rate: step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled-weight-decay Adam over an explicit parameter list.

    ``step`` consumes each parameter's gradient buffer and resets it.
    Parameters must all carry gradients when ``step`` runs; a missing
    gradient signals mis-wired training and raises.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros(p.data.size, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.data.size, dtype=np.float64) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        rate = self.lr if lr is None else float(lr)
        self.step_count += 1
        for param, m, v in zip(self.params, self._m, self._v):
            if param.grad is None:
                raise ContractError(
                    f"AdamW.step: parameter {param!r} has no gradient"
                )
            grad = np.ascontiguousarray(param.grad, dtype=np.float64).reshape(-1)
            kernels.adamw_update(
                param.data.reshape(-1),
                grad,
                m,
                v,
                self.step_count,
                rate,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            )
            param.grad = None
