"""Versioned binary checkpoints: JSON manifest + little-endian float blob.

Layout: 8 magic bytes, an 8-byte little-endian manifest length, the JSON
manifest (format version, run config, tensor directory with name / shape /
dtype / byte offset / byte length), then the concatenated raw tensor
buffers. Tensors round-trip bit-exactly; the three failure modes (mangled
manifest, short blob, wrong format version) raise distinct errors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"STGSWP\r\n"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].astype("<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(tensors: dict[str, np.ndarray], config: dict, path: str):
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.asarray(value)
        tag = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "config": config,
                           "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptManifestError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    head = len(MAGIC) + 8
    if head + mlen > len(data):
        raise CorruptManifestError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(data[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptManifestError(f"{path}: manifest is not valid JSON: {e}") from e

    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CorruptManifestError(f"{path}: manifest missing format_version")
    version = manifest["format_version"]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if "tensors" not in manifest or "config" not in manifest:
        raise CorruptManifestError(f"{path}: manifest missing tensors or config")

    blob = data[head + mlen:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            dtype = _DTYPES[entry["dtype"]]
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptManifestError(f"{path}: malformed tensor entry: {e}") from e
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CorruptManifestError(
                f"{path}: tensor {name} declares {nbytes} bytes for shape {shape}")
        if off < 0 or off + nbytes > len(blob):
            raise TruncatedBlobError(
                f"{path}: truncated blob, tensor {name} needs bytes "
                f"[{off}, {off + nbytes}) of {len(blob)}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=off).reshape(shape)
        tensors[name] = np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))
    return Checkpoint(config=manifest["config"], tensors=tensors)


def split_prefix(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Select tensors under a name prefix, with the prefix stripped."""
    return {name[len(prefix):]: arr for name, arr in tensors.items()
            if name.startswith(prefix)}
