"""On-disk formats: the VQAU feature/code container, JSON artifacts, atomic writes.

Every file format used by the toolkit is defined here so the other modules
agree on bytes.  The VQAU container is a little-endian header

    magic  'VQAU'   4 bytes
    version u32     currently 1
    kind    u32     0 = float features, 1 = code indices
    n_frames u32
    dim      u32    1 for code files
    frame_rate_hz f32

followed by a row-major payload: float32 for features, uint32 for codes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VQAU"
VERSION = 1
KIND_FEATURES = 0
KIND_CODES = 1

_HEADER = struct.Struct("<4sIIIIf")
_U32_MAX = 2**32 - 1


class FormatError(Exception):
    """Raised when a VQAU file (or other artifact) is malformed."""


@dataclass
class FeatureSequence:
    """Time-major matrix of feature frames for one utterance."""

    frames: np.ndarray  # (n_frames, dim) float32
    frame_rate_hz: float

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class CodeSequence:
    """Discrete unit indices at the (downsampled) code frame rate."""

    indices: np.ndarray  # (n_frames,) uint32
    frame_rate_hz: float

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint32)
        if self.indices.ndim != 1:
            raise ValueError(f"indices must be 1-D, got shape {self.indices.shape}")

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes via a temp file + rename so readers never see partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def serialize_sequence(seq) -> bytes:
    """Encode a FeatureSequence or CodeSequence as VQAU bytes."""
    if isinstance(seq, FeatureSequence):
        kind = KIND_FEATURES
        payload = np.ascontiguousarray(seq.frames, dtype="<f4")
        n_frames, dim = payload.shape
    elif isinstance(seq, CodeSequence):
        kind = KIND_CODES
        payload = np.ascontiguousarray(seq.indices, dtype="<u4")
        n_frames, dim = payload.shape[0], 1
    else:
        raise TypeError(f"cannot serialize {type(seq).__name__}")
    if n_frames > _U32_MAX or dim > _U32_MAX:
        raise FormatError("sequence dimensions overflow the u32 header fields")
    header = _HEADER.pack(MAGIC, VERSION, kind, n_frames, dim, float(seq.frame_rate_hz))
    return header + payload.tobytes()


def deserialize_sequence(data: bytes):
    """Decode VQAU bytes into a FeatureSequence or CodeSequence."""
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the VQAU header")
    magic, version, kind, n_frames, dim, frame_rate = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported VQAU version {version}")
    if kind not in (KIND_FEATURES, KIND_CODES):
        raise FormatError(f"unknown payload kind {kind}")
    expected = _HEADER.size + 4 * n_frames * dim
    if len(data) != expected:
        raise FormatError(f"payload length {len(data) - _HEADER.size} does not match "
                          f"header ({n_frames} x {dim})")
    body = data[_HEADER.size:]
    if kind == KIND_FEATURES:
        frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, dim)
        return FeatureSequence(frames=frames.copy(), frame_rate_hz=frame_rate)
    if dim != 1:
        raise FormatError(f"code files must have dim 1, got {dim}")
    indices = np.frombuffer(body, dtype="<u4").copy()
    return CodeSequence(indices=indices, frame_rate_hz=frame_rate)


def write_features(path, seq) -> None:
    """Write a FeatureSequence or CodeSequence to a VQAU file (atomically)."""
    atomic_write_bytes(path, serialize_sequence(seq))


def read_features(path):
    """Read a VQAU file back into a FeatureSequence or CodeSequence."""
    with open(path, "rb") as fh:
        return deserialize_sequence(fh.read())


def write_json(path, obj) -> None:
    """Atomically write a JSON artifact with stable key order."""
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def config_fingerprint(mapping) -> str:
    """Short stable hash of a flat configuration mapping."""
    lines = [f"{k}={mapping[k]}" for k in sorted(mapping)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Checkpoint container: one JSON header line, then one VQAU record per tensor.
# ---------------------------------------------------------------------------

def pack_tensor_records(named_arrays) -> tuple[list[dict], bytes]:
    """Pack (name, array) pairs into an index plus concatenated VQAU records.

    Arrays are stored flattened to (1, size) float32 records; the true shape
    lives in the returned index so n-d tensors survive the 2-D container.
    """
    index = []
    blobs = []
    for name, arr in named_arrays:
        arr = np.asarray(arr, dtype=np.float64)
        seq = FeatureSequence(frames=arr.reshape(1, arr.size).astype(np.float32),
                              frame_rate_hz=0.0)
        index.append({"name": name, "shape": list(arr.shape)})
        blobs.append(serialize_sequence(seq))
    return index, b"".join(blobs)


def unpack_tensor_records(index: list[dict], data: bytes) -> dict[str, np.ndarray]:
    """Inverse of pack_tensor_records; returns float64 arrays keyed by name."""
    out = {}
    offset = 0
    for entry in index:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        record_len = _HEADER.size + 4 * size
        seq = deserialize_sequence(data[offset:offset + record_len])
        out[entry["name"]] = seq.frames.astype(np.float64).reshape(shape)
        offset += record_len
    if offset != len(data):
        raise FormatError("trailing bytes after the last tensor record")
    return out
