"""Finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, freeze_stop_gradients, no_grad


def grad_check(
    scalar_function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    ``scalar_function`` receives the given tensors and must return a
    scalar. Returns the maximum over all input coordinates of
    ``|analytic - central| / max(1, |central|)``.

    Stop-gradient is handled by differencing the modified function: the
    first (analytic) evaluation records every stop-gradient output, and
    the perturbed evaluations replay those values as constants, so a
    blocked path contributes zero on both sides of the comparison.
    """
    if epsilon <= 0:
        raise ContractError(f"grad_check: epsilon must be positive, got {epsilon}")

    probes = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with freeze_stop_gradients("record"):
        out = scalar_function(*probes)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: function must return a scalar Tensor")
    out.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in probes
    ]

    def frozen_eval() -> float:
        with no_grad(), freeze_stop_gradients("replay"):
            return float(scalar_function(*probes).data)

    worst = 0.0
    for probe, grad in zip(probes, analytic):
        flat = probe.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            high = frozen_eval()
            flat[i] = keep - epsilon
            low = frozen_eval()
            flat[i] = keep
            central = (high - low) / (2.0 * epsilon)
            err = abs(grad_flat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
