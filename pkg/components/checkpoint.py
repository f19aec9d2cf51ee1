"""
Self-describing checkpoint file: a JSON name table followed by raw
little-endian tensor bytes.

Layout::

    8 bytes   magic  b"PLMIMCKP"
    4 bytes   format version (uint32, little-endian)
    8 bytes   header length H (uint64, little-endian)
    H bytes   UTF-8 JSON header: metadata + [{name, dtype, shape, offset, nbytes}]
    payload   tensors back to back, offsets relative to the payload start

No pickling is involved, so files can be read by any implementation.
"""
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

from utils.errors import CorruptCheckpointError, VersionMismatchError
from utils.logging_utils import logger

MAGIC = b"PLMIMCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _valid_entry(entry) -> bool:
    if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
        return False
    if entry.get("dtype") not in _TORCH_DTYPES:
        return False
    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        return False
    return all(isinstance(entry.get(k), int) and entry[k] >= 0 for k in ("offset", "nbytes"))


def write_tensor_file(path, tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> Path:
    """
    Write named tensors plus JSON-serializable metadata.

    Args:
        path: Destination file; written via a temporary file and renamed
        tensors: Name -> tensor; names must be unique
        meta: Extra header fields (configs, step, RNG state, ...)

    Returns:
        Path of the written file
    """
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        if tensor.dtype not in _DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {tensor.dtype}")
        array = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[tensor.dtype], copy=False)
        blob = array.tobytes(order="C")
        table.append(
            {"name": name, "dtype": _DTYPES[tensor.dtype], "shape": list(array.shape),
             "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)

    header = dict(meta)
    header.update({"tensors": table, "payload_bytes": offset})
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    logger.info(f"Wrote {len(table)} tensors ({offset} bytes) to {path}")
    return path


def read_tensor_file(path) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """
    Read and validate a file written by ``write_tensor_file``.

    Returns:
        (header metadata without the tensor table, name -> tensor)
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = _PREFIX.size + header_len
    if len(data) < start:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})")
    if not isinstance(header, dict):
        raise CorruptCheckpointError(f"{path}: header is not a JSON object")

    table = header.pop("tensors", None)
    payload_bytes = header.pop("payload_bytes", None)
    if not isinstance(table, list) or not isinstance(payload_bytes, int):
        raise CorruptCheckpointError(f"{path}: header lacks a tensor table")
    if len(data) != start + payload_bytes:
        raise CorruptCheckpointError(
            f"{path}: payload is {len(data) - start} bytes, header declares {payload_bytes}"
        )

    tensors: Dict[str, torch.Tensor] = {}
    expected_offset = 0
    for entry in table:
        if not _valid_entry(entry) or entry["name"] in tensors:
            raise CorruptCheckpointError(f"{path}: bad tensor entry {entry}")
        name, shape, offset, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
        np_dtype = np.dtype(entry["dtype"])
        if offset != expected_offset or nbytes != int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize:
            raise CorruptCheckpointError(f"{path}: tensor {name!r} has inconsistent offset/size")
        buf = data[start + offset:start + offset + nbytes]
        array = np.frombuffer(buf, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array.astype(np_dtype.newbyteorder("="), copy=False))
        expected_offset += nbytes
    if expected_offset != payload_bytes:
        raise CorruptCheckpointError(f"{path}: tensor table does not cover the payload")
    return header, tensors
