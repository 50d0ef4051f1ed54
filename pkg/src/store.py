import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from clap import ClapModel, embed_many
from errors import DataError, InputError

UNIT_NORM_TOLERANCE = 1e-9


class ReferenceStore:
    def __init__(self, ids: Sequence[int], embeddings: np.ndarray, labels: Sequence[int]):
        """
        Emotion embeddings of a reference corpus, one unit row per utterance.

        Args:
            ids: Unique utterance ids.
            embeddings: N x D array of unit-norm rows.
            labels: Emotion class of each reference.
        """
        self.logger = logging.getLogger(__name__)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(set(self.ids.tolist())) != len(self.ids):
            raise DataError("reference ids must be unique")
        if self.embeddings.shape[0] != len(self.ids) or len(self.labels) != len(self.ids):
            raise DataError("ids, embeddings and labels must have the same length")
        if len(self.ids) and np.max(np.abs(np.linalg.norm(self.embeddings, axis=1) - 1.0)) > UNIT_NORM_TOLERANCE:
            raise DataError("reference embeddings must be unit-norm")

    def __len__(self):
        return len(self.ids)

    def label_of(self, utterance_id: int) -> int:
        matches = np.flatnonzero(self.ids == utterance_id)
        if not len(matches):
            raise InputError(f"utterance {utterance_id} is not in the reference store")
        return int(self.labels[matches[0]])

    def to_dict(self):
        return {
            "ids": self.ids.tolist(),
            "embeddings": self.embeddings.tolist(),
            "labels": self.labels.tolist(),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, sort_keys=True)
        self.logger.info(f"Saved reference store with {len(self)} entries to {path}")

    @classmethod
    def load(cls, path) -> "ReferenceStore":
        with open(path, "r", encoding="utf-8") as handle:
            record = json.load(handle)
        return cls(record["ids"], np.asarray(record["embeddings"]), record["labels"])


def build_reference_store(references: Sequence, model: ClapModel) -> ReferenceStore:
    """Embed each reference utterance with the audio encoder."""
    if not references:
        raise DataError("reference subset is empty")
    embeddings = embed_many("reference", [u.audio_features for u in references], model)
    return ReferenceStore([u.id for u in references], embeddings, [u.emotion_id for u in references])


def retrieve(query: np.ndarray, store: ReferenceStore, k: int = 1) -> List[Tuple[int, float]]:
    """
    Exact cosine ranking of the store against ``query``.

    Returns:
        The top ``k`` (id, cosine) pairs, highest cosine first; equal
        cosines are ordered by ascending id.
    """
    if not len(store):
        raise DataError("cannot retrieve from an empty store")
    if not 1 <= k <= len(store):
        raise InputError(f"k must be in [1, {len(store)}], got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(query)
    if norm == 0 or not np.isfinite(norm):
        raise DataError("query embedding has no direction")
    scores = store.embeddings @ (query / norm)
    order = np.lexsort((store.ids, -scores))[:k]
    return [(int(store.ids[i]), float(scores[i])) for i in order]
