"""
Checkpoint files for ModelParams

Layout:

    b"FSEQ1" | manifest length (uint64, little-endian) | manifest (UTF-8 JSON) | payload

The manifest records the hyper-parameters, the payload dtype, one entry per
tensor {name, shape, offset, nbytes} in canonical order and the SHA-256 of
the payload. The payload is the tensors as contiguous little-endian float32.
"""

import hashlib
import json
import logging
import os
import struct

import numpy as np

from .base import CheckpointError, ConfigError
from .behrt import HyperParams, ModelParams, canonical_shapes

logger = logging.getLogger("flask.app")

MAGIC = b"FSEQ1"
PAYLOAD_DTYPE = "<f4"
LENGTH_FORMAT = "<Q"
LENGTH_SIZE = struct.calcsize(LENGTH_FORMAT)
# fields that change what the stored numbers mean, even at equal tensor shapes
ARCHITECTURE_FIELDS = ("hidden", "layers", "heads", "ffn_dim", "max_len", "vocab_size", "num_groups", "age_buckets", "year_buckets")


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Writes params to path; the file appears atomically"""
    try:
        params.validate()
    except Exception as error:
        raise CheckpointError(f"cannot save {path}: {error}") from error

    entries, chunks, offset = [], [], 0
    for name in canonical_shapes(params.hyper):
        data = np.ascontiguousarray(params[name], dtype=PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = json.dumps(
        {
            "hyper": params.hyper.serialize(),
            "dtype": PAYLOAD_DTYPE,
            "tensors": entries,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    partial = path + ".partial"
    with open(partial, "wb") as stream:
        stream.write(MAGIC)
        stream.write(struct.pack(LENGTH_FORMAT, len(manifest)))
        stream.write(manifest)
        stream.write(payload)
    os.replace(partial, path)
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", path, len(entries), len(payload))


def _read_manifest(blob: bytes, path: str) -> tuple[dict, bytes]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    start = len(MAGIC) + LENGTH_SIZE
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated header")
    (length,) = struct.unpack(LENGTH_FORMAT, blob[len(MAGIC) : start])
    if len(blob) < start + length:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"{path}: unreadable manifest") from error
    if manifest.get("dtype") != PAYLOAD_DTYPE:
        raise CheckpointError(f"{path}: unsupported dtype {manifest.get('dtype')}")
    return manifest, blob[start + length :]


def _check_architecture(stored: dict, hyper: HyperParams, path: str) -> None:
    if not isinstance(stored, dict):
        raise CheckpointError(f"{path}: manifest has no hyper-parameters")
    for name in ARCHITECTURE_FIELDS:
        if stored.get(name) != getattr(hyper, name):
            raise CheckpointError(
                f"{path}: hyper-parameter mismatch for '{name}': stored {stored.get(name)}, expected {getattr(hyper, name)}"
            )


def load_checkpoint(path: str, hyper: HyperParams = None) -> ModelParams:
    """
    Reads a checkpoint

    When hyper is given, the stored tensors must have exactly the names and
    shapes that hyper implies and the stored architecture fields must equal
    hyper's; otherwise the stored hyper-parameters are used.
    """
    try:
        with open(path, "rb") as stream:
            blob = stream.read()
    except OSError as error:
        raise CheckpointError(f"{path}: cannot read checkpoint: {error.strerror}") from error

    manifest, payload = _read_manifest(blob, path)
    entries = manifest.get("tensors", [])
    expected_size = sum(entry["nbytes"] for entry in entries)
    if len(payload) < expected_size:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {expected_size} bytes)")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    if hyper is None:
        try:
            hyper = HyperParams.deserialize(manifest.get("hyper"))
        except ConfigError as error:
            raise CheckpointError(f"{path}: stored hyper-parameters are invalid: {error}") from error

    expected = canonical_shapes(hyper)
    stored = {entry["name"]: entry for entry in entries}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names mismatch: missing {missing}, extra {extra}")

    tensors = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{path}: shape mismatch for tensor '{name}': stored {tuple(entry['shape'])}, expected {shape}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or entry["nbytes"] != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{path}: corrupt extent for tensor '{name}'")
        tensors[name] = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(shape).astype(np.float32)
    _check_architecture(manifest.get("hyper"), hyper, path)
    logger.debug("Loaded checkpoint %s", path)
    return ModelParams(hyper, tensors)
