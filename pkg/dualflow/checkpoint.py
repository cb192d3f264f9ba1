"""Checkpoint files: a one-line JSON manifest followed by one little-endian blob.

The manifest lists every tensor's name, shape, dtype and byte offset into the
blob, plus free-form metadata (model configuration, decode-point wiring).
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from dualflow.atomic import atomic_write
from dualflow.errors import CheckpointError
from dualflow.tensor_core import Tensor

FORMAT_NAME = "dualflow-checkpoint"
FORMAT_VERSION = 1


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    dtype: str = Field(description="Little-endian numpy dtype string, e.g. '<f8'")
    offset: int = Field(ge=0, description="Byte offset into the data blob")
    nbytes: int = Field(ge=0)


class CheckpointManifest(BaseModel):
    format: str = FORMAT_NAME
    version: int = FORMAT_VERSION
    tensors: list[TensorEntry] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)

    def entry(self, name: str) -> TensorEntry:
        for entry in self.tensors:
            if entry.name == name:
                return entry
        raise CheckpointError(f"checkpoint has no tensor named '{name}'")


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, Tensor | np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> CheckpointManifest:
    manifest = CheckpointManifest(metadata=dict(metadata or {}))
    chunks: list[bytes] = []
    offset = 0
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.tensors.append(
            TensorEntry(name=name, shape=list(arr.shape), dtype=arr.dtype.str, offset=offset, nbytes=len(raw))
        )
        chunks.append(raw)
        offset += len(raw)

    with atomic_write(path, "wb") as fh:
        fh.write(manifest.model_dump_json().encode("utf-8") + b"\n")
        for raw in chunks:
            fh.write(raw)
    return manifest


def read_manifest(path: str | Path) -> tuple[CheckpointManifest, bytes]:
    try:
        content = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head, sep, blob = content.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: missing manifest terminator")
    try:
        manifest = CheckpointManifest.model_validate(json.loads(head.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.format != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
    return manifest, blob


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], CheckpointManifest]:
    manifest, blob = read_manifest(path)
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.tensors:
        end = entry.offset + entry.nbytes
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor '{entry.name}' runs past the end of the blob")
        dtype = np.dtype(entry.dtype)
        arr = np.frombuffer(blob[entry.offset : end], dtype=dtype).reshape(entry.shape)
        arrays[entry.name] = arr.astype(dtype.newbyteorder("="))
    return arrays, manifest
