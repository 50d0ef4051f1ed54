import logging
from typing import Callable, Sequence

import numpy as np

from autograd import Tensor, no_grad

logger = logging.getLogger(__name__)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """
    Compare autodiff gradients against central differences.

    ``f`` rebuilds the scalar from the current values of ``params`` on every
    call and must be deterministic. Each coordinate is nudged by +-h in place
    and restored afterwards.

    Returns:
        max |a - b| / max(|a|, |b|, floor) over every coordinate of every parameter.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else np.array(p.grad) for p in params]

    worst = 0.0
    with no_grad():
        for param, grad in zip(params, analytic):
            param.data = np.ascontiguousarray(param.data)
            flat = param.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                upper = f().item()
                flat[i] = original - h
                lower = f().item()
                flat[i] = original
                numeric = (upper - lower) / (2.0 * h)
                a = grad_flat[i]
                error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, error)
    logger.debug(f"finite_diff_check over {len(params)} tensors: max relative error {worst:.3e}")
    return worst
