"""
Synthetic emotional speech corpus with a known generating process.

Each utterance has a content token walk, content features (token embedding
plus noise), audio surrogate features (content plus a projected, intensity
scaled emotion direction) and a Mel surrogate produced by a fixed affine map
of content and emotion. Because the map is known, every trained model can be
scored against the noise-free oracle.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, InputError
from rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happy", "sad", "angry", "fear", "surprise", "disgust")

TEMPLATES = (
    "a {deg} {word} voice",
    "the speaker sounds {deg} {word}",
    "say it in a {deg} {word} tone please",
)

EMOTION_WORDS = {
    "neutral": ("calm", "plain", "flat", "even"),
    "happy": ("happy", "joyful", "cheerful", "delighted"),
    "sad": ("sad", "gloomy", "sorrowful", "tearful"),
    "angry": ("angry", "furious", "irritated", "hostile"),
    "fear": ("scared", "fearful", "anxious", "terrified"),
    "surprise": ("surprised", "astonished", "amazed", "startled"),
    "disgust": ("disgusted", "revolted", "repulsed", "sickened"),
}

DEGREE_WORDS = ("very", "slightly", "quite", "rather", "deeply", "somewhat")

UNKNOWN_TOKEN = "<unk>"
MAX_PROMPT_TOKENS = 24
INTENSITY_RANGE = (0.5, 1.0)
MAX_INTENSITY = 2.0


def _build_vocabulary() -> Dict[str, int]:
    words = set(DEGREE_WORDS)
    for template in TEMPLATES:
        words.update(w for w in template.split() if not w.startswith("{"))
    for synonyms in EMOTION_WORDS.values():
        words.update(synonyms)
    return {word: index for index, word in enumerate([UNKNOWN_TOKEN] + sorted(words))}


PROMPT_VOCABULARY = _build_vocabulary()


def tokenize_prompt(text: str) -> List[int]:
    """
    Map a prompt to vocabulary ids, unknown words to 0.

    Raises:
        InputError: if the prompt has more than MAX_PROMPT_TOKENS words.
    """
    words = text.lower().split()
    if len(words) > MAX_PROMPT_TOKENS:
        raise InputError(f"prompt has {len(words)} tokens; at most {MAX_PROMPT_TOKENS} are allowed")
    return [PROMPT_VOCABULARY.get(word, 0) for word in words]


class EmotionSpec:
    def __init__(
        self,
        emotion_dim: int = 8,
        content_dim: int = 8,
        audio_extra_dim: int = 4,
        mel_dim: int = 16,
        content_vocab: int = 32,
        min_frames: int = 8,
        max_frames: int = 16,
        noise_std: float = 0.01,
        emotion_gain: float = 2.0,
        templates_per_class: int = len(TEMPLATES),
        noise_free: bool = False,
        seed: int = 0,
    ):
        """
        Fixed ground truth of the synthetic corpus.

        Args:
            emotion_dim: Width of the emotion space; must hold 7 orthonormal directions.
            content_dim: Width of the content features.
            audio_extra_dim: Extra audio dimensions beyond the content ones.
            mel_dim: Width of the Mel surrogate.
            content_vocab: Size of the content token alphabet.
            min_frames: Shortest utterance in frames.
            max_frames: Longest utterance in frames.
            noise_std: Standard deviation of every additive noise term.
            emotion_gain: Scale of the emotion term in the audio surrogate and of the Mel emotion matrix.
            templates_per_class: Prompt templates per class (at most the number defined).
            noise_free: Drop every noise term so identities hold exactly.
            seed: Seed of the fixed matrices.
        """
        if emotion_dim < len(EMOTIONS):
            raise ConfigurationError(f"emotion_dim must be at least {len(EMOTIONS)}, got {emotion_dim}")
        if not 1 <= min_frames <= max_frames:
            raise ConfigurationError(f"invalid frame range [{min_frames}, {max_frames}]")
        if not 1 <= templates_per_class <= len(TEMPLATES):
            raise ConfigurationError(f"templates_per_class must be in [1, {len(TEMPLATES)}]")
        self.emotion_dim = emotion_dim
        self.content_dim = content_dim
        self.audio_extra_dim = audio_extra_dim
        self.audio_dim = content_dim + audio_extra_dim
        self.mel_dim = mel_dim
        self.content_vocab = content_vocab
        self.min_frames = min_frames
        self.max_frames = max_frames
        self.noise_std = 0.0 if noise_free else noise_std
        self.emotion_gain = emotion_gain
        self.templates_per_class = templates_per_class
        self.noise_free = noise_free
        self.seed = seed
        self.classes = EMOTIONS

        rng = make_rng(seed, "emotion-spec")
        basis, _ = np.linalg.qr(rng.standard_normal((emotion_dim, emotion_dim)))
        self.class_directions = basis[:, : len(EMOTIONS)].T.copy()
        audio_basis, _ = np.linalg.qr(rng.standard_normal((self.audio_dim, emotion_dim)))
        self.audio_projection = audio_basis.T.copy()
        self.token_embeddings = rng.standard_normal((content_vocab, content_dim)) / np.sqrt(content_dim)
        self.transitions = rng.dirichlet(np.ones(content_vocab), size=content_vocab)
        self.mel_content = rng.standard_normal((content_dim, mel_dim)) / np.sqrt(content_dim)
        self.mel_emotion = emotion_gain * rng.standard_normal((emotion_dim, mel_dim)) / np.sqrt(emotion_dim)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_templates(self) -> int:
        return self.num_classes * self.templates_per_class

    def template_ids(self, emotion_id: int) -> List[int]:
        start = emotion_id * self.templates_per_class
        return list(range(start, start + self.templates_per_class))

    def emotion_vector(self, emotion_id: int) -> np.ndarray:
        self.check_emotion(emotion_id)
        return self.class_directions[emotion_id]

    def check_emotion(self, emotion_id: int):
        if not 0 <= int(emotion_id) < self.num_classes:
            raise InputError(f"unknown emotion id {emotion_id}; expected 0..{self.num_classes - 1}")

    def to_dict(self):
        return {
            "emotion_dim": self.emotion_dim,
            "content_dim": self.content_dim,
            "audio_extra_dim": self.audio_extra_dim,
            "mel_dim": self.mel_dim,
            "content_vocab": self.content_vocab,
            "min_frames": self.min_frames,
            "max_frames": self.max_frames,
            "noise_std": self.noise_std,
            "emotion_gain": self.emotion_gain,
            "templates_per_class": self.templates_per_class,
            "noise_free": self.noise_free,
            "seed": self.seed,
        }


class Utterance:
    def __init__(
        self,
        id: int,
        content_tokens: List[int],
        content_features: np.ndarray,
        audio_features: np.ndarray,
        emotion_id: int,
        intensity_gt: float,
        prompt_text: str,
        prompt_template_id: int,
        mel_target: np.ndarray,
        mel_noise_seed: Optional[int] = None,
    ):
        self.id = id
        self.content_tokens = list(content_tokens)
        self.content_features = np.asarray(content_features, dtype=np.float64)
        self.audio_features = np.asarray(audio_features, dtype=np.float64)
        self.emotion_id = emotion_id
        self.intensity_gt = intensity_gt
        self.prompt_text = prompt_text
        self.prompt_template_id = prompt_template_id
        self.mel_target = np.asarray(mel_target, dtype=np.float64)
        self.mel_noise_seed = mel_noise_seed

    @property
    def num_frames(self) -> int:
        return len(self.content_tokens)

    @property
    def prompt_tokens(self) -> List[int]:
        return tokenize_prompt(self.prompt_text)

    def to_dict(self):
        return {
            "id": self.id,
            "content_tokens": self.content_tokens,
            "content_features": self.content_features.tolist(),
            "audio_features": self.audio_features.tolist(),
            "emotion_id": self.emotion_id,
            "intensity_gt": self.intensity_gt,
            "prompt_text": self.prompt_text,
            "prompt_template_id": self.prompt_template_id,
            "mel_target": self.mel_target.tolist(),
            "mel_noise_seed": self.mel_noise_seed,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Utterance":
        return cls(**record)


class CorpusSplit:
    def __init__(self, train: List[int], val: List[int], test: List[int], seed: int, ratios: Tuple[float, float, float]):
        self.train = train
        self.val = val
        self.test = test
        self.seed = seed
        self.ratios = tuple(ratios)

    def to_dict(self):
        return {
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "seed": self.seed,
            "ratios": list(self.ratios),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "CorpusSplit":
        return cls(record["train"], record["val"], record["test"], record["seed"], tuple(record["ratios"]))


def synth_target(
    spec: EmotionSpec,
    content_features: np.ndarray,
    emotion_id: int,
    intensity: float,
    noise_seed: Optional[int] = None,
) -> np.ndarray:
    """
    Oracle Mel surrogate: content @ A + intensity * (direction @ B) + noise.

    Noise is drawn only when ``noise_seed`` is given and ``spec`` is not
    noise-free, so the result is exactly affine in ``intensity`` otherwise.
    """
    spec.check_emotion(emotion_id)
    if not 0.0 <= intensity <= MAX_INTENSITY:
        raise InputError(f"intensity must be in [0, {MAX_INTENSITY}], got {intensity}")
    content_features = np.asarray(content_features, dtype=np.float64)
    emotion_term = intensity * (spec.class_directions[emotion_id] @ spec.mel_emotion)
    mel = content_features @ spec.mel_content + emotion_term
    if noise_seed is not None and spec.noise_std > 0:
        mel = mel + spec.noise_std * make_rng(noise_seed, "mel-noise").standard_normal(mel.shape)
    return mel


def render_prompt(spec: EmotionSpec, emotion_id: int, template_id: int, seed: int) -> Tuple[str, int]:
    spec.check_emotion(emotion_id)
    if template_id not in spec.template_ids(emotion_id):
        raise InputError(f"template {template_id} does not belong to emotion {spec.classes[emotion_id]}")
    rng = make_rng(seed, "prompt", template_id)
    words = EMOTION_WORDS[spec.classes[emotion_id]]
    template = TEMPLATES[template_id % spec.templates_per_class]
    text = template.format(
        deg=DEGREE_WORDS[int(rng.integers(len(DEGREE_WORDS)))],
        word=words[int(rng.integers(len(words)))],
    )
    if not tokenize_prompt(text):
        raise InputError(f"template {template_id} rendered an empty prompt")
    return text, template_id


def _content_walk(spec: EmotionSpec, rng: np.random.Generator, length: int) -> List[int]:
    tokens = [int(rng.integers(spec.content_vocab))]
    for _ in range(length - 1):
        tokens.append(int(rng.choice(spec.content_vocab, p=spec.transitions[tokens[-1]])))
    return tokens


def audio_surrogate(
    spec: EmotionSpec,
    content_features: np.ndarray,
    emotion_id: int,
    intensity: float,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Audio surrogate: [content, 0] + emotion_gain * intensity * (direction @ P) + noise.

    P is the fixed D_e x D_a projection with orthonormal rows, so the emotion
    term maps back through P.T to emotion_gain * intensity * direction. The
    same gain scales the Mel emotion matrix B.
    """
    frames = content_features.shape[0]
    padded = np.concatenate([content_features, np.zeros((frames, spec.audio_extra_dim))], axis=1)
    emotion = spec.emotion_gain * intensity * (spec.class_directions[emotion_id] @ spec.audio_projection)
    audio = padded + emotion
    if rng is not None and spec.noise_std > 0:
        audio = audio + spec.noise_std * rng.standard_normal(audio.shape)
    return audio


def generate_corpus(spec: EmotionSpec, n: int, seed: int) -> List[Utterance]:
    """
    Generate ``n`` utterances with balanced classes (counts differ by at most one).

    Raises:
        InputError: if n is smaller than the number of classes.
    """
    if n < spec.num_classes:
        raise InputError(f"corpus needs at least {spec.num_classes} utterances, got {n}")
    labels = make_rng(seed, "labels").permutation(np.arange(n) % spec.num_classes)

    utterances = []
    for index in range(n):
        rng = make_rng(seed, "utterance", index)
        emotion_id = int(labels[index])
        length = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        tokens = _content_walk(spec, rng, length)
        content = spec.token_embeddings[tokens]
        if spec.noise_std > 0:
            content = content + spec.noise_std * rng.standard_normal(content.shape)
        intensity = float(rng.uniform(*INTENSITY_RANGE))
        template_id = spec.template_ids(emotion_id)[int(rng.integers(spec.templates_per_class))]
        prompt_text, template_id = render_prompt(
            spec, emotion_id, template_id, derive_seed(seed, "prompt", index)
        )
        audio = audio_surrogate(spec, content, emotion_id, intensity, rng)
        noise_seed = None if spec.noise_free else derive_seed(seed, "mel", index)
        utterances.append(
            Utterance(
                id=index,
                content_tokens=tokens,
                content_features=content,
                audio_features=audio,
                emotion_id=emotion_id,
                intensity_gt=intensity,
                prompt_text=prompt_text,
                prompt_template_id=template_id,
                mel_target=synth_target(spec, content, emotion_id, intensity, noise_seed),
                mel_noise_seed=noise_seed,
            )
        )
    logger.info(f"Generated {n} utterances over {spec.num_classes} emotions (seed {seed}).")
    return utterances


def split(
    corpus: Sequence[Utterance],
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> CorpusSplit:
    """
    Stratified train/val/test split.

    Every class contributes round(ratio * class_size) items to val and test,
    with at least one item whenever the ratio is positive.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if ratios[0] == 0:
        raise ConfigurationError("train ratio must be positive")

    by_class: Dict[int, List[int]] = {}
    for utterance in corpus:
        by_class.setdefault(utterance.emotion_id, []).append(utterance.id)

    train, val, test = [], [], []
    for emotion_id in sorted(by_class):
        ids = sorted(by_class[emotion_id])
        order = [ids[i] for i in make_rng(seed, "split", emotion_id).permutation(len(ids))]
        counts = [max(1, int(round(r * len(ids)))) if r > 0 else 0 for r in ratios[1:]]
        if sum(counts) >= len(ids):
            raise ConfigurationError(
                f"class {emotion_id} has {len(ids)} items, too few for ratios {ratios}"
            )
        val.extend(order[: counts[0]])
        test.extend(order[counts[0] : counts[0] + counts[1]])
        train.extend(order[counts[0] + counts[1] :])
    return CorpusSplit(sorted(train), sorted(val), sorted(test), seed, ratios)


def save_corpus(path: Path, utterances: Sequence[Utterance]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for utterance in utterances:
            handle.write(json.dumps(utterance.to_dict(), sort_keys=True) + "\n")
    logger.info(f"Wrote {len(utterances)} utterances to {path}.")


def load_corpus(path: Path) -> List[Utterance]:
    with open(path, "r", encoding="utf-8") as handle:
        return [Utterance.from_dict(json.loads(line)) for line in handle if line.strip()]


def class_counts(corpus: Sequence[Utterance], num_classes: int = len(EMOTIONS)) -> List[int]:
    counts = [0] * num_classes
    for utterance in corpus:
        counts[utterance.emotion_id] += 1
    return counts
