"""
Checkpoint container.

Layout (all integers little-endian):

    b"EVCK" | version (1 byte) | manifest length (u64) | manifest (UTF-8 JSON)
            | payload length (u64) | payload (float64 LE)

The manifest lists every array as {name, shape, offset, nbytes} plus the
model kind and training metadata. Writing is deterministic, so
save -> load -> save reproduces the file byte for byte.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from errors import (
    CorruptManifestError,
    IncompatibleCheckpointError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from layers import Module
from optim import Optimizer

MAGIC = b"EVCK"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")
OPTIM_PREFIX = "optim."

logger = logging.getLogger(__name__)


class Checkpoint:
    def __init__(
        self,
        kind: str,
        arrays: "OrderedDict[str, np.ndarray]",
        metadata: Optional[dict] = None,
        version: int = FORMAT_VERSION,
    ):
        self.kind = kind
        self.arrays = OrderedDict((name, np.asarray(a, dtype=np.float64)) for name, a in arrays.items())
        self.metadata = metadata or {}
        self.version = version

    @classmethod
    def from_module(
        cls,
        kind: str,
        module: Module,
        metadata: Optional[dict] = None,
        optimizer: Optional[Optimizer] = None,
    ) -> "Checkpoint":
        arrays = module.state_dict()
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
        return cls(kind, arrays, metadata)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))

    @property
    def model_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith(OPTIM_PREFIX)}

    @property
    def has_optimizer_state(self) -> bool:
        return any(k.startswith(OPTIM_PREFIX) for k in self.arrays)

    def restore(self, module: Module, kind: Optional[str] = None, optimizer: Optional[Optimizer] = None):
        """Load parameters (and optionally optimizer moments) into live objects."""
        if kind is not None and kind != self.kind:
            raise IncompatibleCheckpointError(f"expected a {kind!r} checkpoint, got {self.kind!r}")
        module.load_state_dict(self.model_arrays)
        if optimizer is not None:
            if not self.has_optimizer_state:
                raise IncompatibleCheckpointError("checkpoint carries no optimizer state to resume from")
            optimizer.load_state_arrays(self.arrays, self.step)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, values in checkpoint.arrays.items():
        raw = np.ascontiguousarray(values, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(values.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"kind": checkpoint.kind, "params": entries, "metadata": checkpoint.metadata},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(chunks)
    return b"".join(
        [
            MAGIC,
            bytes([checkpoint.version]),
            _LENGTH.pack(len(manifest)),
            manifest,
            _LENGTH.pack(len(payload)),
            payload,
        ]
    )


def _check_entries(entries, payload_length: int):
    end = 0
    for entry in entries:
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptManifestError(f"malformed manifest entry {entry!r}") from e
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise CorruptManifestError(f"{name}: {nbytes} bytes do not match shape {shape}")
        if offset < end:
            raise CorruptManifestError(f"{name}: offset {offset} overlaps the previous array")
        end = offset + nbytes
        if end > payload_length:
            raise CorruptManifestError(f"{name}: bytes [{offset}, {end}) exceed payload of {payload_length}")
    if end != payload_length:
        raise CorruptManifestError(f"manifest covers {end} bytes but payload declares {payload_length}")


def decode_checkpoint(blob: bytes) -> Checkpoint:
    """
    Parse a container produced by ``encode_checkpoint``.

    Raises:
        VersionMismatchError: unknown format version (checked before anything else is read).
        CorruptManifestError: bad magic, unreadable manifest or manifest/payload disagreement.
        TruncatedPayloadError: fewer payload bytes than declared.
    """
    header = len(MAGIC) + 1
    if len(blob) < header or blob[: len(MAGIC)] != MAGIC:
        raise CorruptManifestError("not a checkpoint file (bad magic)")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")

    cursor = header
    if len(blob) < cursor + _LENGTH.size:
        raise CorruptManifestError("manifest length missing")
    (manifest_length,) = _LENGTH.unpack_from(blob, cursor)
    cursor += _LENGTH.size
    if len(blob) < cursor + manifest_length + _LENGTH.size:
        raise CorruptManifestError(f"manifest length {manifest_length} runs past the end of the file")
    try:
        manifest = json.loads(blob[cursor : cursor + manifest_length].decode("utf-8"))
        kind, entries, metadata = manifest["kind"], manifest["params"], manifest["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorruptManifestError(f"unreadable manifest: {e}") from e
    cursor += manifest_length

    (payload_length,) = _LENGTH.unpack_from(blob, cursor)
    cursor += _LENGTH.size
    _check_entries(entries, payload_length)
    available = len(blob) - cursor
    if available < payload_length:
        raise TruncatedPayloadError(f"payload holds {available} of {payload_length} declared bytes")
    if available > payload_length:
        raise CorruptManifestError(f"{available - payload_length} trailing bytes after the payload")

    arrays = OrderedDict()
    for entry in entries:
        start = cursor + entry["offset"]
        values = np.frombuffer(blob, dtype=_DTYPE, count=entry["nbytes"] // _DTYPE.itemsize, offset=start)
        arrays[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(kind, arrays, metadata, version)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(checkpoint)
    with open(path, "wb") as handle:
        handle.write(blob)
    logger.info(f"Saved {checkpoint.kind} checkpoint ({len(checkpoint.arrays)} arrays, {len(blob)} bytes) to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        checkpoint = decode_checkpoint(handle.read())
    logger.debug(f"Loaded {checkpoint.kind} checkpoint from {path} at step {checkpoint.step}")
    return checkpoint
