"""
Adam optimizer over named tensors

m = b1*m + (1-b1)*g
v = b2*v + (1-b2)*g^2
w = w - lr * m_hat / (sqrt(v_hat) + eps)
"""

import logging
from dataclasses import dataclass

import numpy as np

from .base import DataValidationError
from .behrt import HyperParams, ModelParams, ParamGradients, TensorBundle

logger = logging.getLogger("flask.app")


######################################################################
#  A D A M   S T A T E
######################################################################
@dataclass(frozen=True)
class AdamState:
    """First and second moments congruent with the parameters, plus the step counter"""

    first: TensorBundle
    second: TensorBundle
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        """Fresh optimizer state for a parameter set"""
        return cls(ParamGradients.zeros_like(params), ParamGradients.zeros_like(params), 0)

    def copy(self) -> "AdamState":
        """Deep copy"""
        return AdamState(self.first.copy(), self.second.copy(), self.step)


def adam_step(
    params: ModelParams, grads: ParamGradients, state: AdamState, hyper: HyperParams
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched"""
    for name, grad in grads.items():
        if name not in params.tensors or grad.shape != params[name].shape:
            raise DataValidationError(f"gradient '{name}' is not congruent with the parameters")
        if not np.isfinite(grad).all():
            logger.error("Non-finite gradient in tensor %s at step %d", name, state.step + 1)
            raise DataValidationError(f"non-finite gradient in tensor '{name}'")

    step = state.step + 1
    beta1, beta2 = hyper.beta1, hyper.beta2
    first_correction = 1.0 - beta1**step
    second_correction = 1.0 - beta2**step

    new_params, new_first, new_second = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        first = beta1 * state.first[name] + (1.0 - beta1) * grad
        second = beta2 * state.second[name] + (1.0 - beta2) * grad * grad
        update = hyper.learning_rate * (first / first_correction) / (np.sqrt(second / second_correction) + hyper.epsilon)
        new_params[name] = (value - update).astype(value.dtype, copy=False)
        new_first[name] = first.astype(value.dtype, copy=False)
        new_second[name] = second.astype(value.dtype, copy=False)

    return (
        ModelParams(params.hyper, new_params),
        AdamState(ParamGradients(params.hyper, new_first), ParamGradients(params.hyper, new_second), step),
    )
