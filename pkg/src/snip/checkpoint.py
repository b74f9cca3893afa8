"""Versioned binary checkpoints with a human-readable architecture sidecar.

Layout: magic, format version (u32 LE), manifest length (u64 LE), UTF-8 JSON
manifest, raw little-endian float64 array payload, SHA-256 of everything
before it. Byte output depends only on the saved values, so identical runs
produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .model import Architecture, ModelConfig, ModelParams, count_params
from .spectral import SpectralState

MAGIC = b"SNIPCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    sn: SpectralState | None = None
    rng_state: dict = field(default_factory=dict)
    optimizer_state: dict[str, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def arch(self) -> Architecture:
        return self.params.arch


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".arch.json")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.arrays().items()]
    if ckpt.sn is not None:
        arrays += [(f"sn.u/{k}", ckpt.sn.u[k]) for k in sorted(ckpt.sn.u)]
        arrays += [(f"sn.sigma/{k}", np.asarray(ckpt.sn.sigma[k])) for k in sorted(ckpt.sn.sigma)]
    if ckpt.optimizer_state:
        arrays += [(f"optim/{k}", ckpt.optimizer_state[k]) for k in sorted(ckpt.optimizer_state)]

    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "architecture": ckpt.arch.to_dict(),
        "spectral": None if ckpt.sn is None else {"target": ckpt.sn.target, "mode": ckpt.sn.mode},
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "arrays": entries,
    }
    head = _canonical(manifest)
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    path = Path(path)
    path.write_bytes(body + hashlib.sha256(body).digest())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "architecture": ckpt.arch.to_dict(),
        "params": count_params(ckpt.config, ckpt.arch),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if len(raw) < _HEADER.size + _DIGEST:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, head_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    start = _HEADER.size + head_len
    try:
        manifest = json.loads(body[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None

    payload = body[start:]
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 8 * count or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: array {e['name']} inconsistent with manifest")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)

    try:
        config = ModelConfig(**manifest["model_config"])
        arch = Architecture.from_dict(manifest["architecture"])
        arch.validate(config)
        tensors = {k.split("/", 1)[1]: Tensor(v, requires_grad=True, name=k.split("/", 1)[1])
                   for k, v in arrays.items() if k.startswith("param/")}
        params = ModelParams(config, arch, tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest inconsistent with arrays: {exc}") from None

    sn = None
    if manifest["spectral"] is not None:
        sn = SpectralState(target=manifest["spectral"]["target"], mode=manifest["spectral"]["mode"])
        for k, v in arrays.items():
            if k.startswith("sn.u/"):
                sn.u[k[5:]] = v
            elif k.startswith("sn.sigma/"):
                sn.sigma[k[9:]] = v
    optim = {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")} or None
    return Checkpoint(params, sn, manifest["rng_state"], optim, manifest["metadata"])
