"""Binary checkpoint for the sampler and classifier parameter tables.

Layout (little-endian)::

    b"CSNET\\x01"  magic
    u32            format version
    u32            record count
    record*        u32 name length, name (utf-8), u32 rank, u32 dims[rank],
                   float32 values (row-major)
    u32            config length, config block (utf-8 JSON)

Parameters are stored as float32, which is also the training precision, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import CsNetConfig, CsNetModel
from .trainer import ClassifierModel

__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "write_tensors", "read_tensors"]

MAGIC = b"CSNET\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    csnet: Optional[CsNetModel]
    classifier: ClassifierModel
    train_config: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        if self.csnet is not None:
            out.update({f"csnet/{k}": v for k, v in self.csnet.params.items()})
        out.update({f"clf/{k}": v for k, v in self.classifier.params.items()})
        return out

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def write_tensors(fh, tensors: dict[str, np.ndarray], config: dict, version: int = FORMAT_VERSION) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", version, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_tensors(fh) -> tuple[dict[str, np.ndarray], dict]:
    if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read_exact(fh, 4 * size, f"values of {name}"), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float32)
    (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
    config = json.loads(_read_exact(fh, clen, "config").decode("utf-8"))
    return tensors, config


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config = {
        "train_config": ckpt.train_config,
        "csnet_config": ckpt.csnet.config.to_dict() if ckpt.csnet is not None else None,
        "num_classes": ckpt.classifier.num_classes,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    buf = io.BytesIO()
    write_tensors(buf, ckpt.tensors(), config)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        tensors, config = read_tensors(fh)
    cs_params = {k[len("csnet/") :]: v for k, v in tensors.items() if k.startswith("csnet/")}
    clf_params = {k[len("clf/") :]: v for k, v in tensors.items() if k.startswith("clf/")}
    csnet = None
    if config.get("csnet_config") is not None:
        csnet = CsNetModel(CsNetConfig.from_dict(config["csnet_config"]), cs_params)
    clf = ClassifierModel(config["num_classes"], clf_params)
    return Checkpoint(csnet, clf, config.get("train_config") or {}, config.get("rng_state"), config.get("extra") or {})
