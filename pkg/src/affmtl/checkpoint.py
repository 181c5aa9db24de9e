"""Binary parameter checkpoints.

Layout: u32 format version, u32 header length, UTF-8 JSON header
(architecture, config, seed, provenance, best score/epoch), u32 entry count,
then per entry a length-prefixed UTF-8 name, u32 rank, u32 dims, and the
row-major float64 little-endian payload. Same file bytes in → same model out.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .layers import AffectModel, ModelSpec

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_spec: ModelSpec
    config: dict
    seed: int
    provenance: dict  # {"stage": "single"|"joint", "tasks": [...], ...}
    best_score: float
    best_epoch: int

    def build_model(self) -> AffectModel:
        model = AffectModel(self.model_spec, self.seed)
        model.load_state(self.params)
        return model

    def content_hash(self) -> str:
        """Hash of parameter names + payloads (independent of file location)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = json.dumps({
        "model_spec": ckpt.model_spec.to_dict(),
        "config": ckpt.config,
        "seed": ckpt.seed,
        "provenance": ckpt.provenance,
        "best_score": ckpt.best_score,
        "best_epoch": ckpt.best_epoch,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CHECKPOINT_FORMAT_VERSION, len(header)))
        fh.write(header)
        names = sorted(ckpt.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ParseError(f"{path}: truncated checkpoint header")
        version, header_len = struct.unpack("<II", head)
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParseError(f"{path}: bad checkpoint header: {e}") from None
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise ParseError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(
        params=params,
        model_spec=ModelSpec.from_dict(header["model_spec"]),
        config=header["config"],
        seed=int(header["seed"]),
        provenance=header["provenance"],
        best_score=float(header["best_score"]),
        best_epoch=int(header["best_epoch"]),
    )
