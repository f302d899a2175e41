"""Checkpoint files for trained parameters.

Layout: 8-byte magic ``TARTCKPT``, u32 format version, u8 model-kind tag
(0 dual, 1 cross), a hyperparameter block, the parameter tensors as raw
little-endian float64, and a trailing 8-byte content checksum over
everything before it.  Save followed by load is bit-exact; corrupted or
unrecognized files are rejected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .encoder import CrossParams, DualParams
from .errors import DataError
from .hashing import hash64

MAGIC = b"TARTCKPT"
VERSION = 1
_KIND_TAGS = {"dual": 0, "cross": 1}
_CHECKSUM_SEED = 0xC0DE_C0DE


def _payload(params: DualParams | CrossParams) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    if isinstance(params, DualParams):
        parts.append(struct.pack("<B", _KIND_TAGS["dual"]))
        parts.append(
            struct.pack("<IId", params.num_buckets, params.dim, params.temperature)
        )
    elif isinstance(params, CrossParams):
        parts.append(struct.pack("<B", _KIND_TAGS["cross"]))
        parts.append(
            struct.pack("<III", params.num_buckets, params.dim, params.hidden_dim)
        )
    else:
        raise DataError("bad_kind", f"cannot checkpoint {type(params).__name__}")
    for name in params.TENSOR_FIELDS:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        parts.append(arr.tobytes())
    return b"".join(parts)


def fingerprint_params(params: DualParams | CrossParams) -> int:
    """64-bit content fingerprint; changes whenever any parameter changes."""
    return hash64(_payload(params), seed=_CHECKSUM_SEED)


def save_checkpoint(params: DualParams | CrossParams, path: str | Path) -> None:
    payload = _payload(params)
    checksum = hash64(payload, seed=_CHECKSUM_SEED)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))


def load_checkpoint(
    path: str | Path, expect_kind: str | None = None
) -> DualParams | CrossParams:
    """Load and verify a checkpoint.

    ``expect_kind`` ("dual" or "cross") turns a wrong model kind into a
    ``kind_mismatch`` error instead of returning the other container.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 1 + 8:
        raise DataError("bad_magic", f"{path}: file too short")
    payload, stored = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    if payload[: len(MAGIC)] != MAGIC:
        raise DataError("bad_magic", f"{path}: not a checkpoint file")
    if hash64(payload, seed=_CHECKSUM_SEED) != stored:
        raise DataError("bad_checksum", f"{path}: content checksum mismatch")

    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    if version != VERSION:
        raise DataError("unknown_version", f"{path}: version {version}")
    (tag,) = struct.unpack_from("<B", payload, offset)
    offset += 1

    if tag == _KIND_TAGS["dual"]:
        kind = "dual"
        num_buckets, dim, temperature = struct.unpack_from("<IId", payload, offset)
        offset += 4 + 4 + 8
        shapes = {
            "embedding_table": (num_buckets, dim),
            "empty_row": (dim,),
            "projection": (dim, dim),
        }
        tensors = {}
        for name in DualParams.TENSOR_FIELDS:
            shape = shapes[name]
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            tensors[name] = arr.reshape(shape).copy()
            offset += count * 8
        params: DualParams | CrossParams = DualParams(
            num_buckets=num_buckets, dim=dim, temperature=temperature, **tensors
        )
    elif tag == _KIND_TAGS["cross"]:
        kind = "cross"
        num_buckets, dim, hidden_dim = struct.unpack_from("<III", payload, offset)
        offset += 12
        shapes = {
            "embedding_table": (num_buckets, dim),
            "hidden_w": (dim, hidden_dim),
            "hidden_b": (hidden_dim,),
            "output_w": (hidden_dim,),
            "output_b": (),
        }
        tensors = {}
        for name in CrossParams.TENSOR_FIELDS:
            shape = shapes[name]
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            tensors[name] = arr.reshape(shape).copy()
            offset += count * 8
        params = CrossParams(
            num_buckets=num_buckets, dim=dim, hidden_dim=hidden_dim, **tensors
        )
    else:
        raise DataError("bad_kind", f"{path}: unknown model tag {tag}")

    if offset != len(payload):
        raise DataError("bad_checksum", f"{path}: trailing bytes in payload")
    if expect_kind is not None and expect_kind != kind:
        raise DataError(
            "kind_mismatch", f"{path}: expected {expect_kind}, found {kind}"
        )
    return params
