"""
Conditional flow-matching decoder.

Training regresses a vector field onto the straight optimal-transport path
between Gaussian noise and the target mel; inference integrates that field
with a fixed-step Euler solver, optionally with classifier-free guidance.
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from autograd import Tensor, concat, no_grad, shift
from errors import ConfigurationError, DimensionError, InputError
from layers import MLP, Linear, Module, MultiHeadAttention, sinusoidal_embedding
from rng import make_rng

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
TIME_SCALE = 1000.0
DEFAULT_STEPS = 25
DEFAULT_BLOCKS = 6

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise InputError(f"flow time must lie in [0, 1], got {t}")
    return t


def _per_item(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Scalar t applies to every item; a (B,) vector broadcasts over the trailing axes
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def _frame_mask(mask: Optional[np.ndarray], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:-1])
    return np.asarray(mask, dtype=np.float64)


def ot_path(x0: np.ndarray, x1: np.ndarray, t, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """psi_t(x0) = (1 - (1 - sigma_min) t) x0 + t x1, for scalar or per-item t."""
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"noise {x0.shape} and target {x1.shape} disagree")
    t = _per_item(_check_time(t), x0)
    return (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1


def cfm_target(x0: np.ndarray, x1: np.ndarray, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """Time derivative of the OT path: x1 - (1 - sigma_min) x0."""
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"noise {x0.shape} and target {x1.shape} disagree")
    return x1 - (1.0 - sigma_min) * x0


class OtPathSample:
    def __init__(self, x0: np.ndarray, x1: np.ndarray, t: np.ndarray, sigma_min: float = SIGMA_MIN):
        self.x0 = x0
        self.x1 = x1
        self.t = t
        self.psi_t = ot_path(x0, x1, t, sigma_min)
        self.target = cfm_target(x0, x1, sigma_min)

    @classmethod
    def draw(cls, x1: np.ndarray, rng: np.random.Generator, sigma_min: float = SIGMA_MIN) -> "OtPathSample":
        """Per-item t ~ U[0, 1] and x0 ~ N(0, I) shaped like x1."""
        x1 = np.asarray(x1, dtype=np.float64)
        t = rng.uniform(0.0, 1.0, size=x1.shape[0])
        x0 = rng.standard_normal(x1.shape)
        return cls(x0, x1, t, sigma_min)


class SamplerConfig:
    def __init__(self, steps: int = DEFAULT_STEPS, guidance_scale: float = 1.0, seed: int = 0):
        if steps < 1:
            raise ConfigurationError(f"sampler needs at least one step, got {steps}")
        if guidance_scale < 0.0:
            raise ConfigurationError(f"guidance scale must be non-negative, got {guidance_scale}")
        self.steps = steps
        self.guidance_scale = guidance_scale
        self.seed = seed

    def to_dict(self):
        return {"steps": self.steps, "guidance_scale": self.guidance_scale, "seed": self.seed}


class TimeEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden: Optional[int] = None):
        self.dim = dim
        self.mlp = MLP(dim, hidden or 2 * dim, dim, rng)


def time_embedding(t, params: TimeEmbedding) -> Tensor:
    """Sinusoid of 1000 t followed by a two-layer MLP; returns (B, D_t)."""
    t = np.atleast_1d(_check_time(t))
    return params.mlp(Tensor(sinusoidal_embedding(TIME_SCALE * t, params.dim)))


class FiLM(Module):
    def __init__(self, cond_dim: int, dim: int, rng: np.random.Generator):
        self.scale = Linear(cond_dim, dim, rng, zero_init=True, bias_value=1.0)
        self.shift = Linear(cond_dim, dim, rng, zero_init=True, bias_value=0.0)


def film(x: Tensor, cond, params: FiLM) -> Tensor:
    """Feature-wise scale(cond) * x + shift(cond), broadcast over frames."""
    cond = _as_tensor(cond)
    scale, offset = params.scale(cond), params.shift(cond)
    if scale.ndim == x.ndim - 1:
        scale = scale.reshape(scale.shape[0], 1, scale.shape[-1])
        offset = offset.reshape(offset.shape[0], 1, offset.shape[-1])
    return scale * x + offset


def conv1d_k3(x: Tensor, params: Linear) -> Tensor:
    """Kernel-3 convolution over frames with zero padding, written as a linear map of shifted copies."""
    return params(concat([shift(x, 1, axis=-2), x, shift(x, -1, axis=-2)], axis=-1))


class ResNetBlock(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.conv1 = Linear(3 * dim, dim, rng)
        self.conv2 = Linear(3 * dim, dim, rng)


def resnet_block(x: Tensor, params: ResNetBlock, mask: np.ndarray) -> Tensor:
    frames = mask[..., None]
    hidden = conv1d_k3(x * frames, params.conv1).gelu() * frames
    return x + conv1d_k3(hidden, params.conv2)


class CfmBlock(Module):
    def __init__(self, dim: int, time_dim: int, cond_dim: int, heads: int, rng: np.random.Generator):
        self.time_proj = Linear(time_dim, dim, rng)
        self.resnet = ResNetBlock(dim, rng)
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.film = FiLM(cond_dim, dim, rng)


def cfm_block(x: Tensor, t_emb: Tensor, h, params: CfmBlock, mask: np.ndarray) -> Tensor:
    step = params.time_proj(t_emb)
    x = x + step.reshape(step.shape[0], 1, step.shape[-1])
    x = resnet_block(x, params.resnet, mask)
    x = x + params.attention(x, mask)
    return film(x, h, params.film) * mask[..., None]


class CfmDecoder(Module):
    def __init__(
        self,
        mel_dim: int = 16,
        cond_dim: int = 32,
        emotion_dim: int = 32,
        dim: int = 32,
        time_dim: int = 32,
        blocks: int = DEFAULT_BLOCKS,
        heads: int = 2,
        sigma_min: float = SIGMA_MIN,
        p_uncond: float = 0.0,
        seed: int = 0,
    ):
        """
        Args:
            mel_dim: Number of mel bins produced.
            cond_dim: Width of the fused condition f.
            emotion_dim: Width of the gated emotion embedding used by FiLM.
            dim: Hidden width of the estimator.
            time_dim: Width of the time embedding.
            blocks: Number of CFM blocks.
            heads: Attention heads per block.
            sigma_min: Noise floor of the OT path.
            p_uncond: Probability of dropping the condition while training.
        """
        if blocks < 1:
            raise ConfigurationError(f"decoder needs at least one block, got {blocks}")
        if not 0.0 <= p_uncond < 1.0:
            raise ConfigurationError(f"condition dropout must be in [0, 1), got {p_uncond}")
        rng = make_rng(seed, "cfm-init")
        self.mel_dim = mel_dim
        self.cond_dim = cond_dim
        self.emotion_dim = emotion_dim
        self.sigma_min = sigma_min
        self.p_uncond = p_uncond
        self.time_embedding = TimeEmbedding(time_dim, rng)
        self.input_proj = Linear(mel_dim + cond_dim, dim, rng)
        self.blocks = [CfmBlock(dim, time_dim, emotion_dim, heads, rng) for _ in range(blocks)]
        self.output_proj = Linear(dim, mel_dim, rng)

    @property
    def supports_guidance(self) -> bool:
        return self.p_uncond > 0.0


def vector_field(x_t, t, f, h, params: CfmDecoder, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Estimate v_theta(x_t, t, f, h) for a (B, T, D_mel) batch.

    Args:
        x_t: Point on the path.
        t: Scalar flow time or a (B,) vector.
        f: Fused condition (B, T, cond_dim).
        h: Gated emotion embedding (B, emotion_dim).
        params: Decoder parameters.
        mask: (B, T), 1 for real frames.
    """
    x_t, f, h = _as_tensor(x_t), _as_tensor(f), _as_tensor(h)
    if x_t.ndim != 3 or x_t.shape[-1] != params.mel_dim:
        raise DimensionError(f"x_t must be (B, T, {params.mel_dim}), got {x_t.shape}")
    batch, frames = x_t.shape[0], x_t.shape[1]
    if f.shape != (batch, frames, params.cond_dim):
        raise DimensionError(f"condition must be ({batch}, {frames}, {params.cond_dim}), got {f.shape}")
    if h.shape != (batch, params.emotion_dim):
        raise DimensionError(f"emotion must be ({batch}, {params.emotion_dim}), got {h.shape}")
    t = _check_time(t)
    if t.ndim == 0:
        t = np.full(batch, float(t))
    frame_mask = _frame_mask(mask, x_t.shape)

    t_emb = time_embedding(t, params.time_embedding)
    x = params.input_proj(concat([x_t, f], axis=-1)) * frame_mask[..., None]
    for block in params.blocks:
        x = cfm_block(x, t_emb, h, block, frame_mask)
    return params.output_proj(x) * frame_mask[..., None]


class FlowBatch:
    def __init__(self, x1: np.ndarray, f, h, mask: Optional[np.ndarray] = None):
        self.x1 = np.asarray(x1, dtype=np.float64)
        self.f = f
        self.h = h
        self.mask = _frame_mask(mask, self.x1.shape)


def cfm_loss(
    batch: FlowBatch,
    params: CfmDecoder,
    seed: int,
    field: Optional[Callable[[np.ndarray, np.ndarray], Tensor]] = None,
) -> Tensor:
    """
    Masked mean squared error between the estimated field and the OT target.

    Args:
        batch: Targets with their condition and frame mask.
        params: Decoder parameters.
        seed: Seed for t and x0 draws.
        field: Optional replacement estimator taking (psi_t, t).
    """
    sample = OtPathSample.draw(batch.x1, make_rng(seed, "cfm-loss"), params.sigma_min)
    frames = batch.mask[..., None]
    psi_t = sample.psi_t * frames
    if field is None:
        v = vector_field(psi_t, sample.t, batch.f, batch.h, params, batch.mask)
    else:
        v = _as_tensor(field(psi_t, sample.t))
    diff = (v - sample.target) * frames
    count = float(batch.mask.sum()) * batch.x1.shape[-1]
    if count == 0:
        raise InputError("flow-matching loss over an empty batch")
    return (diff * diff).sum() * (1.0 / count)


def _initial_noise(config: SamplerConfig, shape, frame_mask: np.ndarray, item_seeds) -> np.ndarray:
    if item_seeds is None:
        return make_rng(config.seed, "euler-noise").standard_normal(shape)
    if len(item_seeds) != shape[0]:
        raise DimensionError(f"{len(item_seeds)} seeds for a batch of {shape[0]}")
    x0 = np.zeros(shape)
    for i, seed in enumerate(item_seeds):
        length = int(frame_mask[i].sum())
        x0[i, :length] = make_rng(seed, "euler-noise").standard_normal((length, shape[-1]))
    return x0


def euler_integrate(x0: np.ndarray, velocity_fn: VelocityFn, steps: int) -> np.ndarray:
    """x_{k+1} = x_k + (1/steps) v(x_k, k/steps), from t=0 to t=1."""
    if steps < 1:
        raise ConfigurationError(f"Euler integration needs at least one step, got {steps}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity_fn(x, k * dt)
    return x


def euler_sample(
    f,
    h,
    config: SamplerConfig,
    params: CfmDecoder,
    mask: Optional[np.ndarray] = None,
    f_uncond=None,
    item_seeds: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Integrate the learned field from seeded noise to a mel estimate.

    Guidance blends v_unc + s (v_cond - v_unc), where the unconditional
    branch sees ``f_uncond`` and a zero emotion. It only applies to a decoder
    trained with condition dropout; s == 1 skips the second branch.
    With ``item_seeds`` each item draws its own starting noise over its real
    frames, so a batched call matches the single-item calls.

    Returns:
        (B, T, D_mel) array, zero on padded frames.
    """
    f, h = _as_tensor(f), _as_tensor(h)
    batch, frames = f.shape[0], f.shape[1]
    frame_mask = _frame_mask(mask, f.shape)
    guided = config.guidance_scale != 1.0
    if guided and not params.supports_guidance:
        logger.warning(
            f"guidance scale {config.guidance_scale} ignored: decoder was trained without condition dropout"
        )
        guided = False
    if guided:
        f_unc = _as_tensor(np.zeros(f.shape) if f_uncond is None else f_uncond)
        h_unc = np.zeros(h.shape)

    def velocity(x: np.ndarray, t: float) -> np.ndarray:
        v = vector_field(x, t, f, h, params, frame_mask).data
        if guided:
            v_unc = vector_field(x, t, f_unc, h_unc, params, frame_mask).data
            v = v_unc + config.guidance_scale * (v - v_unc)
        return v

    x0 = _initial_noise(config, (batch, frames, params.mel_dim), frame_mask, item_seeds)
    params.eval()
    with no_grad():
        x1 = euler_integrate(x0 * frame_mask[..., None], velocity, config.steps)
    logger.debug(f"Euler sampling finished: {config.steps} steps, guidance={config.guidance_scale}")
    return x1 * frame_mask[..., None]
