"""
Emotion contrastive language-audio alignment.

Audio and text encoders map an utterance's acoustic surrogate and its natural
language prompt into a shared unit-norm space. Training compares the batch
similarity distributions with soft labels built from the categorical emotion
labels and the prompt template labels, using a four-term symmetric KL loss.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from autograd import Tensor, no_grad
from corpus import tokenize_prompt
from errors import DataError, DimensionError, DomainError, InputError, TrainingDivergedError
from layers import MLP, Module, l2_normalize
from optim import Optimizer
from rng import make_rng

logger = logging.getLogger(__name__)

ALPHA_E = 0.2
SMOOTHING_ALPHA = 1e-8
TEMPERATURE_INIT = 2.3
KL_FLOOR = 1e-12
_TINY = 1e-300
LOSS_VARIANTS = ("symkl", "kl")


class EmoBatch:
    def __init__(
        self,
        audio_features: Sequence[np.ndarray],
        emotion_label: Sequence[int],
        prompt_tokens: Sequence[Sequence[int]],
        prompt_label: Sequence[int],
        num_classes: int = 7,
    ):
        sizes = {len(audio_features), len(emotion_label), len(prompt_tokens), len(prompt_label)}
        if len(sizes) != 1:
            raise DataError(f"batch fields have different lengths: {sorted(sizes)}")
        if any(not 0 <= int(label) < num_classes for label in emotion_label):
            raise InputError(f"emotion labels must be in [0, {num_classes})")
        self.audio_features = list(audio_features)
        self.emotion_label = np.asarray(emotion_label, dtype=np.int64)
        self.prompt_tokens = [list(tokens) for tokens in prompt_tokens]
        self.prompt_label = np.asarray(prompt_label, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.audio_features)

    @classmethod
    def from_utterances(cls, utterances) -> "EmoBatch":
        return cls(
            [u.audio_features for u in utterances],
            [u.emotion_id for u in utterances],
            [u.prompt_tokens for u in utterances],
            [u.prompt_template_id for u in utterances],
        )

    def permuted(self, order: Sequence[int]) -> "EmoBatch":
        return EmoBatch(
            [self.audio_features[i] for i in order],
            self.emotion_label[list(order)],
            [self.prompt_tokens[i] for i in order],
            self.prompt_label[list(order)],
        )


class ClapModel(Module):
    def __init__(
        self,
        audio_dim: int,
        vocab_size: int,
        dim: int = 32,
        hidden: Optional[int] = None,
        token_dim: Optional[int] = None,
        temperature_init: float = TEMPERATURE_INIT,
        seed: int = 0,
    ):
        """
        Toy audio and text encoders plus the two learnable temperatures.

        Args:
            audio_dim: Width of the audio surrogate frames.
            vocab_size: Prompt vocabulary size.
            dim: Shared embedding width D.
            hidden: Hidden width of both MLPs (defaults to D).
            token_dim: Token embedding width (defaults to D).
            temperature_init: Initial value of both temperatures.
            seed: Initialisation seed.
        """
        hidden = hidden or dim
        token_dim = token_dim or dim
        rng = make_rng(seed, "clap-init")
        self.dim = dim
        self.vocab_size = vocab_size
        self.audio_encoder = MLP(audio_dim, hidden, dim, rng)
        self.token_embedding = Tensor(rng.standard_normal((vocab_size, token_dim)), requires_grad=True)
        self.text_encoder = MLP(token_dim, hidden, dim, rng)
        # Log-parameterised so the temperatures stay positive under any update
        self.log_eps_audio = Tensor([np.log(temperature_init)], requires_grad=True)
        self.log_eps_text = Tensor([np.log(temperature_init)], requires_grad=True)

    @property
    def eps_audio(self) -> Tensor:
        return self.log_eps_audio.exp()

    @property
    def eps_text(self) -> Tensor:
        return self.log_eps_text.exp()


class SimilarityLogits:
    def __init__(self, s_audio: Tensor, s_text: Tensor):
        self.s_audio = s_audio
        self.s_text = s_text


class SoftLabelMatrix:
    def __init__(self, m_y: np.ndarray, m_p: np.ndarray, alpha_e: float = ALPHA_E, alpha: float = SMOOTHING_ALPHA):
        self.m_y = m_y
        self.m_p = m_p
        self.alpha_e = alpha_e
        self.alpha = alpha
        self.m_s = build_soft_labels(m_y, m_p, alpha_e)

    @property
    def m_tilde(self) -> np.ndarray:
        return smooth_targets(self.m_s, self.alpha)


class EmotionEmbedding:
    def __init__(self, vector: np.ndarray, source_mode: str):
        self.vector = np.asarray(vector, dtype=np.float64)
        self.source_mode = source_mode


def _pool_audio(audio_features: Sequence[np.ndarray]) -> np.ndarray:
    pooled = []
    for index, frames in enumerate(audio_features):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise DataError(f"audio sequence {index} is empty")
        pooled.append(frames.mean(axis=0))
    return np.stack(pooled)


def _bag_of_tokens(prompt_tokens: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    bag = np.zeros((len(prompt_tokens), vocab_size))
    for row, tokens in enumerate(prompt_tokens):
        if len(tokens) == 0:
            raise DataError(f"prompt {row} has no tokens")
        for token in tokens:
            if not 0 <= token < vocab_size:
                raise InputError(f"token id {token} outside vocabulary of size {vocab_size}")
            bag[row, token] += 1.0 / len(tokens)
    return bag


def encode_audio(audio_features: Sequence[np.ndarray], model: ClapModel) -> Tensor:
    """Mean-pool each sequence over time, apply the audio MLP and L2-normalise rows."""
    return l2_normalize(model.audio_encoder(Tensor(_pool_audio(audio_features))))


def encode_text(prompt_tokens: Sequence[Sequence[int]], model: ClapModel) -> Tensor:
    """Mean-pool token embeddings, apply the text MLP and L2-normalise rows."""
    # A row of 1/len weights times the embedding table is the token mean
    bag = Tensor(_bag_of_tokens(prompt_tokens, model.vocab_size))
    return l2_normalize(model.text_encoder(bag @ model.token_embedding))


def similarity_logits(z_audio: Tensor, z_text: Tensor, eps_a, eps_t) -> SimilarityLogits:
    if z_audio.shape[-1] != z_text.shape[-1]:
        raise DimensionError(f"embedding widths differ: {z_audio.shape} vs {z_text.shape}")
    if z_audio.shape[0] != z_text.shape[0]:
        raise DimensionError(f"batch sizes differ: {z_audio.shape} vs {z_text.shape}")
    s_audio = (z_audio @ z_text.T) * eps_a
    s_text = (z_text @ z_audio.T) * eps_t
    return SimilarityLogits(s_audio, s_text)


def build_agreement_matrix(labels: Sequence[int]) -> np.ndarray:
    """1 where two items share a label, 0 otherwise, then each row divided by its sum."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("agreement matrix needs at least one label")
    agree = (labels[:, None] == labels[None, :]).astype(np.float64)
    return agree / agree.sum(axis=1, keepdims=True)


def build_soft_labels(m_y: np.ndarray, m_p: np.ndarray, alpha_e: float = ALPHA_E) -> np.ndarray:
    m_y, m_p = np.asarray(m_y, dtype=np.float64), np.asarray(m_p, dtype=np.float64)
    if m_y.shape != m_p.shape or m_y.ndim != 2 or m_y.shape[0] != m_y.shape[1]:
        raise DimensionError(f"soft label inputs must be equal square matrices, got {m_y.shape} and {m_p.shape}")
    return alpha_e * m_y + (1.0 - alpha_e) * m_p


def smooth_targets(m_s: np.ndarray, alpha: float = SMOOTHING_ALPHA, n: Optional[int] = None) -> np.ndarray:
    m_s = np.asarray(m_s, dtype=np.float64)
    n = m_s.shape[-1] if n is None else n
    return (1.0 - alpha) * m_s + alpha / n


def kl_div(
    s: Union[Tensor, np.ndarray],
    m: Union[Tensor, np.ndarray],
    floor: Optional[float] = None,
) -> Tensor:
    """
    KL(S || M) = sum_ij S log(S / M), with 0 log 0 taken as 0.

    Args:
        s: Source distributions (rows sum to 1).
        m: Target distributions (rows sum to 1).
        floor: When given, M is clamped from below at this value; otherwise a
            zero in M where S is positive raises.

    Raises:
        DomainError: M is zero where S is positive and no floor was given.
    """
    s = s if isinstance(s, Tensor) else Tensor(s)
    m = m if isinstance(m, Tensor) else Tensor(m)
    if s.shape != m.shape:
        raise DimensionError(f"KL operands differ in shape: {s.shape} vs {m.shape}")
    if floor is None:
        if np.any((m.data <= 0) & (s.data > 0)):
            raise DomainError("KL target has zero mass where the source is positive")
    else:
        m = m.clamp_min(floor)
    # S * log(S) is 0 where S == 0; the clamp only keeps log finite there
    log_ratio = s.clamp_min(_TINY).log() - m.clamp_min(_TINY).log()
    return (s * log_ratio).sum()


def symkl_loss(
    logits: SimilarityLogits,
    m_s: np.ndarray,
    alpha: float = SMOOTHING_ALPHA,
    variant: str = "symkl",
) -> Tensor:
    """
    Symmetric KL between the row-softmaxed similarity logits and the soft labels.

    ``symkl`` averages KL(S||M) and KL(M~||S) for both directions; ``kl`` keeps
    only the two KL(S||M) terms.
    """
    if variant not in LOSS_VARIANTS:
        raise InputError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")
    s_audio = logits.s_audio.softmax(axis=-1)
    s_text = logits.s_text.softmax(axis=-1)
    if variant == "kl":
        return (kl_div(s_audio, m_s, KL_FLOOR) + kl_div(s_text, m_s, KL_FLOOR)) * 0.5
    m_tilde = smooth_targets(m_s, alpha)
    total = (
        kl_div(s_audio, m_s, KL_FLOOR)
        + kl_div(m_tilde, s_audio, KL_FLOOR)
        + kl_div(s_text, m_s, KL_FLOOR)
        + kl_div(m_tilde, s_text, KL_FLOOR)
    )
    return total * 0.25


def batch_soft_labels(
    batch: EmoBatch,
    alpha_e: float = ALPHA_E,
    alpha: float = SMOOTHING_ALPHA,
    use_emo_label: bool = True,
) -> SoftLabelMatrix:
    m_y = build_agreement_matrix(batch.emotion_label)
    m_p = build_agreement_matrix(batch.prompt_label)
    # Without categorical labels the blend collapses onto the prompt agreement
    return SoftLabelMatrix(m_y, m_p, alpha_e if use_emo_label else 0.0, alpha)


def clap_loss(
    batch: EmoBatch,
    model: ClapModel,
    alpha_e: float = ALPHA_E,
    alpha: float = SMOOTHING_ALPHA,
    use_emo_label: bool = True,
    loss_variant: str = "symkl",
) -> Tensor:
    if batch.size < 2:
        raise DataError(f"contrastive training needs at least 2 items, got {batch.size}")
    labels = batch_soft_labels(batch, alpha_e, alpha, use_emo_label)
    z_audio = encode_audio(batch.audio_features, model)
    z_text = encode_text(batch.prompt_tokens, model)
    logits = similarity_logits(z_audio, z_text, model.eps_audio, model.eps_text)
    return symkl_loss(logits, labels.m_s, alpha, loss_variant)


def clap_train_step(
    batch: EmoBatch,
    model: ClapModel,
    optimizer: Optimizer,
    alpha_e: float = ALPHA_E,
    alpha: float = SMOOTHING_ALPHA,
    use_emo_label: bool = True,
    loss_variant: str = "symkl",
) -> float:
    """Forward, loss, backward and one optimizer step; returns the pre-step loss."""
    model.train()
    optimizer.zero_grad()
    loss = clap_loss(batch, model, alpha_e, alpha, use_emo_label, loss_variant)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite CLAP loss {value} at step {optimizer.state.step + 1} "
            f"(eps_a={model.eps_audio.item():.4g}, eps_t={model.eps_text.item():.4g})"
        )
    loss.backward()
    optimizer.step()
    return value


def embed(mode: str, source, model: ClapModel) -> EmotionEmbedding:
    """
    Emotion embedding from a reference recording or a prompt.

    Args:
        mode: "reference" (``source`` is a T x D_a frame array) or "prompt"
            (``source`` is prompt text or a token id list).
        source: The reference frames or the prompt.
        model: Trained CLAP model; evaluated without graph recording.
    """
    model.eval()
    with no_grad():
        if mode == "reference":
            vector = encode_audio([np.asarray(source)], model).data[0]
        elif mode == "prompt":
            tokens = source
            if isinstance(source, str):
                tokens = tokenize_prompt(source)
            vector = encode_text([list(tokens)], model).data[0]
        else:
            raise InputError(f"embed mode must be 'reference' or 'prompt', got {mode!r}")
    return EmotionEmbedding(vector, mode)


def embed_many(mode: str, sources: Sequence, model: ClapModel) -> np.ndarray:
    """Batched ``embed``; returns an N x D array of unit rows."""
    model.eval()
    with no_grad():
        if mode == "reference":
            return encode_audio(list(sources), model).data
        if mode == "prompt":
            return encode_text([list(s) for s in sources], model).data
    raise InputError(f"embed mode must be 'reference' or 'prompt', got {mode!r}")
