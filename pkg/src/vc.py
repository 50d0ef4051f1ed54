"""
AdaFM-VC conversion model: FuEncoder followed by the flow-matching decoder.
"""

from typing import Optional, Sequence

import numpy as np

from autograd import Tensor, no_grad
from cfm import CfmDecoder, FlowBatch, SamplerConfig, cfm_loss, euler_sample
from errors import DataError, DimensionError, TrainingDivergedError
from fuencoder import FuEncoder, FusedSeq, fuencoder_forward
from layers import Module
from optim import Optimizer
from rng import derive_seed, make_rng
from util import pad_sequences


class VcBatch:
    def __init__(self, content: np.ndarray, mel: np.ndarray, emotion: np.ndarray, mask: np.ndarray):
        self.content = content
        self.mel = mel
        self.emotion = emotion
        self.mask = mask

    @property
    def size(self) -> int:
        return self.content.shape[0]

    @classmethod
    def from_utterances(cls, utterances: Sequence, emotion: np.ndarray) -> "VcBatch":
        """Pad content and target mels of ``utterances``; ``emotion`` holds one embedding row per item."""
        if not utterances:
            raise DataError("empty conversion batch")
        emotion = np.asarray(emotion, dtype=np.float64)
        if emotion.shape[0] != len(utterances):
            raise DimensionError(f"{len(utterances)} utterances but {emotion.shape[0]} embeddings")
        content, mask = pad_sequences([u.content_features for u in utterances])
        mel, _ = pad_sequences([u.mel_target for u in utterances])
        return cls(content, mel, emotion, mask)


class AdaFmVc(Module):
    def __init__(
        self,
        content_dim: int = 8,
        emotion_dim: int = 32,
        mel_dim: int = 16,
        dim: int = 32,
        fusion_blocks: int = 4,
        cfm_blocks: int = 6,
        heads: int = 2,
        sigma_min: float = 1e-4,
        p_uncond: float = 0.0,
        use_aig: bool = True,
        seed: int = 0,
    ):
        self.fuencoder = FuEncoder(
            content_dim=content_dim,
            dim=dim,
            emotion_dim=emotion_dim,
            blocks=fusion_blocks,
            heads=heads,
            use_aig=use_aig,
            seed=seed,
        )
        self.decoder = CfmDecoder(
            mel_dim=mel_dim,
            cond_dim=dim,
            emotion_dim=emotion_dim,
            dim=dim,
            time_dim=dim,
            blocks=cfm_blocks,
            heads=heads,
            sigma_min=sigma_min,
            p_uncond=p_uncond,
            seed=seed,
        )

    def condition(self, content, emotion, lam: float, mask=None, seed: Optional[int] = None) -> FusedSeq:
        return fuencoder_forward(content, emotion, lam, self.fuencoder, mask, seed)

    def loss(self, batch: VcBatch, seed: int) -> Tensor:
        """Flow-matching loss at lambda = 1, with condition dropout when enabled."""
        emotion = batch.emotion
        if self.training and self.decoder.p_uncond > 0:
            keep = make_rng(seed, "condition-dropout").random(batch.size) >= self.decoder.p_uncond
            emotion = emotion * keep[:, None]
        fused = self.condition(batch.content, emotion, 1.0, batch.mask, derive_seed(seed, "prenet"))
        flow = FlowBatch(batch.mel, fused.f, fused.h_gated, batch.mask)
        return cfm_loss(flow, self.decoder, derive_seed(seed, "flow"))

    def convert(
        self,
        content: np.ndarray,
        emotion: np.ndarray,
        lam: float,
        sampler: SamplerConfig,
        mask: Optional[np.ndarray] = None,
        item_seeds: Optional[Sequence[int]] = None,
    ) -> np.ndarray:
        """
        Generate a mel estimate for a (B, T, D_c) content batch.

        Args:
            content: Source content frames.
            emotion: (B, C) target emotion embeddings.
            lam: Intensity lambda in [0, 2].
            sampler: Euler sampler settings.
            mask: (B, T), 1 on real frames.
            item_seeds: Per-item noise seeds (see ``euler_sample``).
        """
        self.eval()
        with no_grad():
            fused = self.condition(content, emotion, lam, mask)
            f_uncond = None
            if sampler.guidance_scale != 1.0 and self.decoder.supports_guidance:
                f_uncond = self.condition(content, np.zeros_like(emotion), lam, mask).f
            return euler_sample(fused.f, fused.h_gated, sampler, self.decoder, mask, f_uncond, item_seeds)


def vc_train_step(batch: VcBatch, model: AdaFmVc, optimizer: Optimizer, seed: int) -> float:
    model.train()
    optimizer.zero_grad()
    loss = model.loss(batch, seed)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite flow-matching loss {value} at step {optimizer.state.step + 1} "
            f"(gate={model.fuencoder.gate.item():.4g})"
        )
    loss.backward()
    optimizer.step()
    return value
