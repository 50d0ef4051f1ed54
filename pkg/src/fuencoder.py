"""
FuEncoder: fuses content frames with a gated emotion embedding.

PreNet -> sinusoidal positions -> adaptive intensity gate -> fusion blocks
(emotion-adaptive layer norm, self-attention, feed-forward) -> projection.
"""

import logging
from typing import Optional

import numpy as np

from autograd import Tensor
from errors import DimensionError, InputError
from layers import Linear, Module, MultiHeadAttention, dropout, layer_norm, sinusoidal_pe
from rng import make_rng

logger = logging.getLogger(__name__)

PRENET_DROPOUT = 0.5
MAX_INTENSITY = 2.0
DEFAULT_BLOCKS = 4


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _over_time(cond: Tensor, x: Tensor) -> Tensor:
    # (B, D) conditioning against (B, T, D) frames needs a time axis
    if cond.ndim == x.ndim - 1:
        return cond.reshape(*cond.shape[:-1], 1, cond.shape[-1])
    return cond


def _apply_mask(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return x
    return x * np.asarray(mask, dtype=np.float64)[..., None]


class PreNet(Module):
    def __init__(self, in_dim: int, dim: int, rng: np.random.Generator, dropout: float = PRENET_DROPOUT):
        self.fc1 = Linear(in_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.dropout = dropout


def prenet(z_c, params: PreNet, training: bool, seed: Optional[int] = None) -> Tensor:
    """Two rounds of linear -> ReLU -> dropout; dropout is active only when training."""
    rng = make_rng(seed, "prenet") if training and seed is not None else None
    x = dropout(params.fc1(_as_tensor(z_c)).relu(), params.dropout, rng, training)
    return dropout(params.fc2(x).relu(), params.dropout, rng, training)


def adaptive_intensity_gate(h, g, lam: float = 1.0, max_intensity: float = MAX_INTENSITY) -> Tensor:
    """
    Scale the emotion embedding by the learnable gate g and the intensity lambda.

    Raises:
        InputError: lambda outside [0, max_intensity].
    """
    if not 0.0 <= lam <= max_intensity:
        raise InputError(f"intensity must be in [0, {max_intensity}], got {lam}")
    return _as_tensor(h) * (_as_tensor(g) * lam)


class EmoAdaLayerNorm(Module):
    def __init__(self, cond_dim: int, dim: int, rng: np.random.Generator):
        # Zero weights with gamma bias 1 and beta bias 0 start as a plain layer norm
        self.gamma = Linear(cond_dim, dim, rng, zero_init=True, bias_value=1.0)
        self.beta = Linear(cond_dim, dim, rng, zero_init=True, bias_value=0.0)


def emo_ada_layer_norm(x: Tensor, h_gated, params: EmoAdaLayerNorm) -> Tensor:
    h_gated = _as_tensor(h_gated)
    gamma = _over_time(params.gamma(h_gated), x)
    beta = _over_time(params.beta(h_gated), x)
    return gamma * layer_norm(x) + beta


class FusionBlock(Module):
    def __init__(
        self,
        dim: int,
        cond_dim: int,
        heads: int,
        ffn_dim: int,
        rng: np.random.Generator,
        zero_output: bool = False,
    ):
        self.norm1 = EmoAdaLayerNorm(cond_dim, dim, rng)
        self.attention = MultiHeadAttention(dim, heads, rng, zero_output=zero_output)
        self.norm2 = EmoAdaLayerNorm(cond_dim, dim, rng)
        self.ffn_in = Linear(dim, ffn_dim, rng)
        self.ffn_out = Linear(ffn_dim, dim, rng, zero_init=zero_output)


def fusion_block(x: Tensor, h_gated, params: FusionBlock, mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm residual block: x + attn(norm1(x)), then + ffn(norm2(x))."""
    x = x + params.attention(emo_ada_layer_norm(x, h_gated, params.norm1), mask)
    x = x + params.ffn_out(params.ffn_in(emo_ada_layer_norm(x, h_gated, params.norm2)).gelu())
    return _apply_mask(x, mask)


class FusedSeq:
    def __init__(self, f: Tensor, h_gated: Tensor, mask: Optional[np.ndarray] = None):
        self.f = f
        self.h_gated = h_gated
        self.mask = mask

    @property
    def shape(self):
        return self.f.shape


class FuEncoder(Module):
    def __init__(
        self,
        content_dim: int = 8,
        dim: int = 32,
        emotion_dim: int = 32,
        blocks: int = DEFAULT_BLOCKS,
        heads: int = 2,
        ffn_dim: Optional[int] = None,
        prenet_dropout: float = PRENET_DROPOUT,
        use_aig: bool = True,
        seed: int = 0,
    ):
        """
        Args:
            content_dim: Width of the content surrogate frames.
            dim: Fusion width D, also the width of the output f.
            emotion_dim: Width of the emotion embedding h.
            blocks: Number of fusion blocks K.
            heads: Attention heads per block.
            ffn_dim: Hidden width of the feed-forward layers (defaults to 2D).
            prenet_dropout: PreNet dropout rate while training.
            use_aig: When False the gate is bypassed and h conditions the blocks unscaled.
            seed: Initialisation seed.
        """
        if blocks < 1:
            raise InputError(f"FuEncoder needs at least one fusion block, got {blocks}")
        rng = make_rng(seed, "fuencoder-init")
        self.dim = dim
        self.emotion_dim = emotion_dim
        self.use_aig = use_aig
        self.prenet = PreNet(content_dim, dim, rng, prenet_dropout)
        # Global gate g = exp(log_gate) > 0, starting at 1
        self.log_gate = Tensor([0.0], requires_grad=use_aig)
        self.blocks = [
            FusionBlock(dim, emotion_dim, heads, ffn_dim or 2 * dim, rng) for _ in range(blocks)
        ]
        self.out_proj = Linear(dim, dim, rng)

    @property
    def gate(self) -> Tensor:
        return self.log_gate.exp()


def fuencoder_forward(
    z_c,
    h,
    lam: float,
    params: FuEncoder,
    mask: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
) -> FusedSeq:
    """
    Fuse a (B, T, D_c) content batch with (B, C) emotion embeddings.

    Args:
        z_c: Content frames, right-padded when lengths differ.
        h: Emotion embeddings.
        lam: Intensity lambda for the gate (ignored without AIG).
        params: Encoder parameters.
        mask: (B, T) array, 1 for real frames.
        seed: Dropout seed, required while training.

    Returns:
        FusedSeq carrying f (B, T, D) and the gated embedding.
    """
    z_c, h = _as_tensor(z_c), _as_tensor(h)
    if z_c.ndim != 3:
        raise DimensionError(f"content batch must be (B, T, D_c), got {z_c.shape}")
    if h.shape != (z_c.shape[0], params.emotion_dim):
        raise DimensionError(f"emotion batch must be ({z_c.shape[0]}, {params.emotion_dim}), got {h.shape}")

    x = prenet(z_c, params.prenet, params.training, seed)
    x = x + sinusoidal_pe(z_c.shape[1], params.dim)
    if params.use_aig:
        h_gated = adaptive_intensity_gate(h, params.gate, lam)
    else:
        h_gated = h
    for block in params.blocks:
        x = fusion_block(x, h_gated, block, mask)
    return FusedSeq(_apply_mask(params.out_proj(x), mask), h_gated, mask)
