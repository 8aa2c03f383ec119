"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   5 bytes  b"ADPT1"
    kind    1 byte   0 = full (every parameter), 1 = delta (trainable only)
    digest  32 bytes sha256 of the architecture description
    count   uint32   number of parameter records
    record  uint16 path length, UTF-8 path, uint8 rank, uint32 dims,
            float64 data (little-endian, row-major)

A delta checkpoint loads over a model that already holds base weights; a
full checkpoint must cover the model's parameter set exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactMismatchError
from .model import Model

MAGIC = b"ADPT1"
KIND_FULL = 0
KIND_DELTA = 1
HEADER_BYTES = len(MAGIC) + 1 + 32 + 4


def record_nbytes(path: str, shape: tuple[int, ...]) -> int:
    """Exact on-disk size of one parameter record."""
    numel = 1
    for dim in shape:
        numel *= dim
    return 2 + len(path.encode()) + 1 + 4 * len(shape) + 8 * numel


def checkpoint_nbytes(entries: list[tuple[str, tuple[int, ...]]]) -> int:
    return HEADER_BYTES + sum(record_nbytes(p, s) for p, s in entries)


def save_checkpoint(model: Model, path: str | Path, kind: int = KIND_FULL) -> None:
    """Write the model's parameters (all, or trainable-only for a delta)."""
    if kind not in (KIND_FULL, KIND_DELTA):
        raise ValueError(f"unknown checkpoint kind {kind}")
    params = [
        p for p in model.parameters() if kind == KIND_FULL or p.trainable
    ]
    digest = bytes.fromhex(model.digest())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", kind))
        fh.write(digest)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            encoded = p.path.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            shape = p.tensor.shape
            fh.write(struct.pack("<B", len(shape)))
            fh.write(np.asarray(shape, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(p.tensor.data).astype("<f8").tobytes())


def read_header(path: str | Path) -> tuple[int, str]:
    """(kind, architecture digest hex) without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_BYTES)
    if len(head) < HEADER_BYTES or head[: len(MAGIC)] != MAGIC:
        raise ArtifactMismatchError(f"{path}: not a checkpoint (bad magic)")
    kind = head[len(MAGIC)]
    digest = head[len(MAGIC) + 1 : len(MAGIC) + 33].hex()
    return kind, digest


def _read_records(path: str | Path) -> tuple[int, str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_BYTES or blob[: len(MAGIC)] != MAGIC:
        raise ArtifactMismatchError(f"{path}: not a checkpoint (bad magic)")
    kind = blob[len(MAGIC)]
    digest = blob[len(MAGIC) + 1 : len(MAGIC) + 33].hex()
    (count,) = struct.unpack_from("<I", blob, len(MAGIC) + 33)
    offset = HEADER_BYTES
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (path_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + path_len].decode()
        offset += path_len
        rank = blob[offset]
        offset += 1
        dims = np.frombuffer(blob, dtype="<u4", count=rank, offset=offset)
        offset += 4 * rank
        numel = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=numel, offset=offset)
        offset += 8 * numel
        arrays[name] = data.reshape(tuple(int(d) for d in dims)).astype(np.float64)
    return kind, digest, arrays


def load_checkpoint(model: Model, path: str | Path, expect_kind: int | None = None) -> int:
    """Load parameter values into the model; returns the checkpoint kind.

    The stored architecture digest must match the model's current digest.
    A full checkpoint must match the parameter set exactly; a delta must be
    a subset of it.
    """
    kind, digest, arrays = _read_records(path)
    if expect_kind is not None and kind != expect_kind:
        raise ArtifactMismatchError(
            f"{path}: expected checkpoint kind {expect_kind}, found {kind}"
        )
    if digest != model.digest():
        raise ArtifactMismatchError(
            f"{path}: architecture digest {digest[:12]}... does not match model "
            f"{model.digest()[:12]}..."
        )
    model_paths = set(model.params)
    extra = set(arrays) - model_paths
    if extra:
        raise ArtifactMismatchError(f"{path}: unknown parameter paths {sorted(extra)[:3]}")
    if kind == KIND_FULL:
        missing = model_paths - set(arrays)
        if missing:
            raise ArtifactMismatchError(
                f"{path}: full checkpoint is missing {sorted(missing)[:3]}"
            )
    for name, arr in arrays.items():
        target = model.params[name].tensor.data
        if arr.shape != target.shape:
            raise ArtifactMismatchError(
                f"{path}: {name} has shape {arr.shape}, model expects {target.shape}"
            )
        target[...] = arr
    return kind
