"""
Oracle-based conversion metrics for the synthetic corpus.
"""

import logging
from typing import Sequence

import numpy as np
from scipy import stats

from corpus import EmotionSpec, synth_target
from errors import DataError
from rng import make_rng
from store import ReferenceStore, retrieve

logger = logging.getLogger(__name__)

PROBE_INTENSITIES = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0)


class EmotionProbe:
    def __init__(self, spec: EmotionSpec, samples_per_cell: int = 4, seed: int = 0):
        """
        Frozen least-squares probe from mel residuals to emotion-space coordinates.

        The probe is fitted on noise-free oracle mels: the residual left after
        removing the content term is averaged over frames and regressed onto
        intensity * class direction.

        Args:
            spec: Ground truth of the corpus.
            samples_per_cell: Random contents per (class, intensity) cell.
            seed: Seed of the fitting contents.
        """
        self.spec = spec
        rng = make_rng(seed, "emotion-probe")
        residuals, coordinates = [], []
        for emotion_id in range(spec.num_classes):
            for intensity in PROBE_INTENSITIES:
                for _ in range(samples_per_cell):
                    content = rng.standard_normal((spec.max_frames, spec.content_dim))
                    mel = synth_target(spec, content, emotion_id, intensity)
                    residuals.append(self.residual(mel, content))
                    coordinates.append(intensity * spec.class_directions[emotion_id])
        self.weights, *_ = np.linalg.lstsq(np.array(residuals), np.array(coordinates), rcond=None)

    def residual(self, mel: np.ndarray, content: np.ndarray) -> np.ndarray:
        return np.mean(np.asarray(mel) - np.asarray(content) @ self.spec.mel_content, axis=0)

    def recover(self, mel: np.ndarray, content: np.ndarray) -> np.ndarray:
        """Emotion-space vector carried by ``mel`` beyond its content."""
        return self.residual(mel, content) @ self.weights


def eecs_surrogate(vector: np.ndarray, spec: EmotionSpec, emotion_id: int) -> float:
    """Cosine between a recovered emotion vector and the class direction, in [-1, 1]."""
    direction = spec.emotion_vector(emotion_id)
    norm = np.linalg.norm(vector)
    if norm == 0:
        return 0.0
    return float(np.clip(np.dot(vector, direction) / norm, -1.0, 1.0))


def emotion_projection(vector: np.ndarray, spec: EmotionSpec, emotion_id: int) -> float:
    return float(np.dot(vector, spec.emotion_vector(emotion_id)))


def cond_mean_error(mel: np.ndarray, oracle: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(mel) - np.asarray(oracle))))


def mel_rmse(mel: np.ndarray, oracle: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(mel) - np.asarray(oracle)) ** 2)))


def retrieval_accuracy(queries: np.ndarray, labels: Sequence[int], store: ReferenceStore) -> float:
    """Fraction of queries whose top-1 reference carries the query's label."""
    if not len(labels):
        raise DataError("no queries to score")
    hits = 0
    for query, label in zip(queries, labels):
        best_id = retrieve(query, store, k=1)[0][0]
        hits += int(store.label_of(best_id) == int(label))
    return hits / len(labels)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    rho, _ = stats.spearmanr(x, y)
    return float(rho) if np.isfinite(rho) else 0.0
