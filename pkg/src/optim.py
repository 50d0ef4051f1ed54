import logging
from collections import OrderedDict
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from autograd import Tensor
from errors import ConfigurationError, DimensionError, IncompatibleCheckpointError

VARIANTS = ("adam", "adamw")


class OptimState:
    def __init__(
        self,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}

    def to_dict(self):
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }


def optimizer_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: OptimState,
    variant: str = "adam",
):
    """
    Apply one bias-corrected Adam or AdamW update in place.

    Adam folds weight decay into the gradient (L2 penalty); AdamW subtracts
    lr * weight_decay * p from the parameter directly. Parameters without a
    gradient are left untouched.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"Unknown optimizer variant {variant!r}; expected one of {VARIANTS}")
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        if variant == "adam" and state.weight_decay:
            grad = grad + state.weight_decay * param.data

        m = state.first_moment.get(name, np.zeros_like(param.data))
        v = state.second_moment.get(name, np.zeros_like(param.data))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        updated = param.data
        if variant == "adamw" and state.weight_decay:
            updated = updated - state.lr * state.weight_decay * updated
        updated = updated - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = updated


class Optimizer:
    def __init__(
        self,
        named_params: Iterable[Tuple[str, Tensor]],
        variant: str = "adam",
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        """
        Wrap a set of named parameters with Adam/AdamW state.

        Args:
            named_params: (name, tensor) pairs, usually ``module.named_parameters()``.
            variant: "adam" or "adamw".
            lr: Learning rate.
            betas: Moment decay rates.
            eps: Denominator guard.
            weight_decay: L2 penalty (adam) or decoupled decay (adamw).
        """
        if variant not in VARIANTS:
            raise ConfigurationError(f"Unknown optimizer variant {variant!r}; expected one of {VARIANTS}")
        self.logger = logging.getLogger(__name__)
        self.params = OrderedDict(named_params)
        self.variant = variant
        self.state = OptimState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        optimizer_step(self.params, grads, self.state, self.variant)
        self.logger.debug(f"{self.variant} step {self.state.step} over {len(grads)} parameters")

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        arrays = OrderedDict()
        for name, param in self.params.items():
            arrays[f"optim.m.{name}"] = self.state.first_moment.get(name, np.zeros_like(param.data))
            arrays[f"optim.v.{name}"] = self.state.second_moment.get(name, np.zeros_like(param.data))
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int):
        for name, param in self.params.items():
            for key, store in (("m", self.state.first_moment), ("v", self.state.second_moment)):
                values = arrays.get(f"optim.{key}.{name}")
                if values is None or values.shape != param.shape:
                    raise IncompatibleCheckpointError(f"optimizer state for {name} is missing or misshaped")
                store[name] = np.array(values, dtype=np.float64)
        self.state.step = step
