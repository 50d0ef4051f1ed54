"""
Seeded random streams.

Every stochastic operation takes an explicit generator built here. Streams are
Philox (counter-based) generators keyed by a root seed plus a path of integer
or string labels, so two calls with the same path always draw the same numbers
and different paths never share a stream.
"""

import zlib
from typing import Union

import numpy as np

from errors import InputError

Label = Union[int, str]


def _label_to_int(label: Label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise InputError(f"Stream labels must be non-negative, got {label}")
    return int(label)


def make_rng(seed: int, *stream: Label) -> np.random.Generator:
    """
    Build the generator for ``seed`` and the sub-stream named by ``stream``.

    Args:
        seed: Root seed of the run.
        *stream: Labels that select an independent sub-stream.

    Returns:
        A numpy Generator backed by Philox.
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_label_to_int(s) for s in stream)
    )
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *stream: Label) -> int:
    """Collapse a stream path into a single 63-bit seed."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
