"""
Checkpoint container.

Layout:
    8 bytes   magic "RBFSNT01"
    8 bytes   header length, little-endian uint64
    N bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       raw little-endian tensor payloads, in header order

The header carries the model description under "meta" and one entry per
tensor (name, shape, dtype, nbytes). Identical models produce identical bytes.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from errors import CheckpointHeaderError, CheckpointMagicError, CheckpointTruncatedError

logger = logging.getLogger(__name__)

MAGIC = b"RBFSNT01"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


def _le_dtype(array: np.ndarray) -> np.dtype:
    return array.dtype.newbyteorder("<")


def write_checkpoint(path, meta: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> None:
    """Write meta and tensors atomically (temp file, then rename)."""
    entries = []
    payloads = []
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        le = array.astype(_le_dtype(array), copy=False)
        if le.dtype.str not in _ALLOWED_DTYPES:
            raise CheckpointHeaderError(f"tensor {name} has unsupported dtype {array.dtype}")
        payload = le.tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": le.dtype.str, "nbytes": len(payload)})
        payloads.append(payload)

    header = json.dumps(
        {"format": FORMAT_VERSION, "meta": meta, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} ({len(entries)} tensors)")


def read_checkpoint(path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns (meta, tensors) exactly as written."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path} is not an rbfsnt checkpoint (bad magic)")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path} ends inside the header length")
    (header_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < start + header_len:
        raise CheckpointTruncatedError(f"{path} ends inside the header")

    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
        fmt = header["format"]
        meta = header["meta"]
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointHeaderError(f"{path} has an unreadable header: {e}")
    if fmt != FORMAT_VERSION:
        raise CheckpointHeaderError(f"{path} uses checkpoint format {fmt}, expected {FORMAT_VERSION}")

    tensors: Dict[str, np.ndarray] = {}
    offset = start + header_len
    for entry in entries:
        try:
            name, shape, dtype, nbytes = entry["name"], tuple(entry["shape"]), entry["dtype"], entry["nbytes"]
        except (KeyError, TypeError) as e:
            raise CheckpointHeaderError(f"{path} has a malformed tensor entry: {e}")
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointHeaderError(f"tensor {name} has unsupported dtype {dtype}")
        if int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize != nbytes:
            raise CheckpointHeaderError(f"tensor {name}: shape {shape} disagrees with {nbytes} payload bytes")
        if len(raw) < offset + nbytes:
            raise CheckpointTruncatedError(f"{path} is truncated inside tensor {name}")
        array = np.frombuffer(raw, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize, offset=offset)
        tensors[name] = array.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointHeaderError(f"{path} has {len(raw) - offset} trailing bytes after the last tensor")
    return meta, tensors


def checkpoint_save(path, model) -> None:
    """Save a Classifier: its config and layer specs in the header, every parameter as a tensor."""
    write_checkpoint(path, model.meta(), {name: p.data for name, p in model.named_parameters().items()})


def checkpoint_load(path):
    """Rebuild a Classifier from a checkpoint written by checkpoint_save."""
    from model import Classifier

    meta, tensors = read_checkpoint(path)
    try:
        model = Classifier.from_meta(meta)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointHeaderError(f"{path} describes an invalid model: {e}")
    expected = model.named_parameters()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointHeaderError(f"{path} tensor names disagree with the model (missing {missing}, extra {extra})")
    for name, param in expected.items():
        if tensors[name].shape != param.shape:
            raise CheckpointHeaderError(f"tensor {name} has shape {tensors[name].shape}, model expects {param.shape}")
    model.load_state_dict(tensors)
    logger.info(f"Loaded checkpoint {path}")
    return model
