"""Losses and the equilibrium controller for reconstruction-critic training.

The critic is trained to reconstruct real heatmaps well and predicted ones
badly; a scalar gain k_t balances the two sides. All losses sum over joints
and pixels and average over the batch. The generator's extra term and the
critic's fake term are the same scalar, so one forward pass of the critic on
the predicted maps serves both.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor, add, mse_sum, scale


class ControllerFault(RuntimeError):
    """The balance controller saw a non-finite loss."""


@dataclass(frozen=True)
class AdversarialState:
    """Controller gain and the coefficients it evolves under."""

    k_t: float = 0.0
    lambda_k: float = 0.001
    gamma: float = 0.5
    lambda_g: float = 0.01

    def validate(self):
        if not 0.0 <= self.k_t <= 1.0:
            raise ControllerFault("k_t must stay in [0, 1]")
        if self.lambda_k < 0 or self.lambda_g < 0 or not 0.0 <= self.gamma <= 1.0:
            raise ControllerFault("controller coefficients out of range")
        return self


@dataclass(frozen=True)
class LossReport:
    """Scalar losses of one iteration, with the k_t they were computed under."""

    l_mse: float
    l_adv: float
    l_g: float
    l_real: float
    l_fake: float
    l_d: float
    k_t: float
    convergence: float


def _batch_mean_sse(a: Tensor, b: Tensor) -> Tensor:
    batch = a.data.shape[0] if a.data.ndim > 0 else 1
    return scale(mse_sum(a, b), 1.0 / batch)


def loss_mse(predictions, target: Tensor) -> Tensor:
    """Squared error of every stack's heatmaps against the one shared target."""
    total = _batch_mean_sse(predictions[0], target)
    for pred in predictions[1:]:
        total = add(total, _batch_mean_sse(pred, target))
    return total


def loss_adv(last_prediction: Tensor, reconstruction: Tensor) -> Tensor:
    """How badly the critic reproduces the predicted maps (generator's view)."""
    return _batch_mean_sse(last_prediction, reconstruction)


def loss_generator_total(l_mse: Tensor, l_adv: Tensor, state: AdversarialState) -> Tensor:
    return add(l_mse, scale(l_adv, state.lambda_g))


def loss_discriminator(l_real: Tensor, l_fake: Tensor, state: AdversarialState) -> Tensor:
    return add(l_real, scale(l_fake, -state.k_t))


def update_kt(state: AdversarialState, l_real: float, l_fake: float) -> AdversarialState:
    """One controller step: k moves toward the configured real/fake balance."""
    if not (np.isfinite(l_real) and np.isfinite(l_fake)):
        raise ControllerFault(f"non-finite losses in controller update: {l_real}, {l_fake}")
    k = state.k_t + state.lambda_k * (state.gamma * l_real - l_fake)
    return replace(state, k_t=min(1.0, max(0.0, k)))


def convergence_measure(l_real: float, l_fake: float, gamma: float) -> float:
    """Scalar training-progress proxy; lower is better, never negative."""
    return l_real + abs(gamma * l_real - l_fake)
