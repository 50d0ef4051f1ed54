"""
Neural-network building blocks on top of the autograd Tensor.
"""

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from autograd import Tensor
from errors import ConfigurationError, IncompatibleCheckpointError

LAYER_NORM_EPS = 1e-10
MASKED_SCORE = -1e9


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """Yield (dotted name, tensor) for every trainable tensor, in definition order."""
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise IncompatibleCheckpointError(
                f"Parameter names disagree (missing={missing}, unexpected={unexpected})"
            )
        for name, param in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != param.shape:
                raise IncompatibleCheckpointError(
                    f"Shape of {name} is {values.shape}, model expects {param.shape}"
                )
            param.data = values.copy()


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
        bias_value: float = 0.0,
    ):
        bound = 1.0 / math.sqrt(in_features)
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = (
            Tensor(np.full(out_features, bias_value), requires_grad=True) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class MLP(Module):
    """Two linear layers with a GELU between them."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    centred = x - x.mean(axis=-1, keepdims=True)
    variance = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * (variance + eps) ** -0.5


def l2_normalize(x: Tensor, eps: float = 1e-30) -> Tensor:
    norm = ((x * x).sum(axis=-1, keepdims=True) + eps) ** 0.5
    return x / norm


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(np.float64)
    return x * (keep / (1.0 - p))


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """
    Sinusoidal features for arbitrary real positions.

    Column 2i holds sin(pos / 10000^(2i/dim)) and column 2i+1 the matching cosine.
    """
    if dim % 2:
        raise ConfigurationError(f"sinusoidal embedding width must be even, got {dim}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    rates = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    angles = positions * rates
    table = np.empty((positions.shape[0], dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    return sinusoidal_embedding(np.arange(length), dim)


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """Additive attention bias that removes padded keys; ``mask`` is 1 for real frames."""
    bias = np.where(np.asarray(mask) > 0, 0.0, MASKED_SCORE)
    return np.expand_dims(bias, (-2, -3))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_output: bool = False):
        if dim % heads:
            raise ConfigurationError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng, zero_init=zero_output)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return multi_head_attention(x, self, self.heads, mask)


def multi_head_attention(
    x: Tensor,
    params: MultiHeadAttention,
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Scaled dot-product self-attention over the second-to-last axis.

    Args:
        x: (..., T, D) input.
        params: Query/key/value/output projections.
        heads: Number of heads; must divide D.
        mask: Optional (..., T) array, 1 for real frames and 0 for padding.

    Returns:
        (..., T, D) output after the output projection.
    """
    dim = x.shape[-1]
    if dim % heads:
        raise ConfigurationError(f"width {dim} is not divisible by {heads} heads")
    head_dim = dim // heads
    lead, length = x.shape[:-2], x.shape[-2]

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, length, heads, head_dim).swapaxes(-2, -3)

    q, k, v = split(params.query(x)), split(params.key(x)), split(params.value(x))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = scores + key_padding_bias(mask)
    weights = scores.softmax(axis=-1)
    merged = (weights @ v).swapaxes(-2, -3).reshape(*lead, length, dim)
    return params.output(merged)
