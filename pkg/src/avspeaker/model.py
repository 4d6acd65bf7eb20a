"""Model container and the binary checkpoint format.

Checkpoint layout (all integers and floats little-endian)::

    magic      8 bytes  b"AVSPKCKP"
    version    uint32   1
    n_blocks   uint32
    per block, in the order of Model.state_blocks():
        name_len  uint16, name (utf-8)
        ndim      uint8,  dims uint32 * ndim
        data      float32 * prod(dims), row-major

Block order: fusion audio stack, fusion visual stack (each fc1.weight,
fc1.bias, bn.gamma, bn.beta, bn.running_mean, bn.running_var, fc2.weight,
fc2.bias), attention.weight, attention.bias, ge2e.w, ge2e.b, then the age
head in the same per-stack order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .fusion import FusionNet
from .losses import AgeHead, Ge2eParams
from .nn import BatchNorm

MAGIC = b"AVSPKCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class Model:
    """Fusion network plus the training heads (similarity scale, age head)."""

    def __init__(self, rng: Optional[np.random.Generator] = None, hidden: int = 512,
                 age_hidden: int = 256):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fusion = FusionNet(rng, hidden=hidden)
        self.ge2e = Ge2eParams()
        self.age_head = AgeHead(self.fusion.out_dim, age_hidden, rng)

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {f"fusion.{k}": v for k, v in self.fusion.parameters().items()}
        out.update({f"ge2e.{k}": v for k, v in self.ge2e.params.items()})
        out.update({f"age.{k}": v for k, v in self.age_head.parameters().items()})
        return out

    def gradients(self) -> Dict[str, np.ndarray]:
        out = {f"fusion.{k}": v for k, v in self.fusion.gradients().items()}
        out.update({f"ge2e.{k}": v for k, v in self.ge2e.grads.items()})
        out.update({f"age.{k}": v for k, v in self.age_head.gradients().items()})
        return out

    def train(self, mode: bool = True) -> "Model":
        self.fusion.train(mode)
        self.age_head.train(mode)
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def state_blocks(self) -> List[Tuple[str, np.ndarray]]:
        blocks = []

        def add_layers(prefix, layers):
            for lname, layer in layers.items():
                for pname, arr in layer.params.items():
                    blocks.append((f"{prefix}.{lname}.{pname}", arr))
                if isinstance(layer, BatchNorm):
                    blocks.append((f"{prefix}.{lname}.running_mean", layer.running_mean))
                    blocks.append((f"{prefix}.{lname}.running_var", layer.running_var))

        add_layers("fusion", self.fusion.layers())
        blocks.append(("ge2e.w", self.ge2e.params["w"]))
        blocks.append(("ge2e.b", self.ge2e.params["b"]))
        add_layers("age", self.age_head.layers())
        return blocks

    def load_blocks(self, blocks: List[Tuple[str, np.ndarray]]) -> None:
        expected = self.state_blocks()
        if len(blocks) != len(expected):
            raise CheckpointError(f"checkpoint has {len(blocks)} blocks, model expects {len(expected)}")
        for (name, arr), (ename, earr) in zip(blocks, expected):
            if name != ename:
                raise CheckpointError(f"block {name!r} found where {ename!r} was expected")
            if arr.shape != earr.shape:
                raise CheckpointError(f"block {name!r} has shape {arr.shape}, model expects {earr.shape}")
        for (_, arr), (_, earr) in zip(blocks, expected):
            earr[...] = arr


def save_checkpoint(model: Model, path) -> None:
    blocks = model.state_blocks()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> List[Tuple[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    try:
        version, n_blocks = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        blocks = []
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64)
            pos += 4 * count
            blocks.append((name, arr.reshape(shape)))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return blocks


def load_checkpoint(path, model: Optional[Model] = None) -> Model:
    blocks = read_checkpoint(path)
    if model is None:
        hidden = dict(blocks).get("fusion.audio.fc1.bias")
        age_hidden = dict(blocks).get("age.fc1.bias")
        model = Model(hidden=hidden.shape[0] if hidden is not None else 512,
                      age_hidden=age_hidden.shape[0] if age_hidden is not None else 256)
    model.load_blocks(blocks)
    return model
