"""Versioned binary checkpoints.

Layout: magic "RGVC", format version u32, u32 length + UTF-8 JSON header
(model config echo, vocabulary, training counters), u32 parameter count, then
per parameter: u32 name length + name, u32 ndim, u32 dims, raw float64
little-endian data. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InputError
from .model import ModelConfig, VaeModel

_MAGIC = b"RGVC"
_VERSION = 1


def save_checkpoint(path, model: VaeModel, vocab: list[str], extra: dict | None = None) -> None:
    header = {
        "format_version": _VERSION,
        "config": {k: v for k, v in vars(model.config).items()},
        "vocab": list(vocab),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = model.params[name].data
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[VaeModel, list[str], dict]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = VaeModel(config, seed=0)
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_elem = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n_elem), dtype="<f8").reshape(shape).copy()
            if name not in model.params:
                raise InputError(f"checkpoint parameter {name!r} unknown to the model")
            if model.params[name].data.shape != data.shape:
                raise InputError(f"checkpoint parameter {name!r} has shape {data.shape}, "
                                 f"expected {model.params[name].data.shape}")
            model.params[name].data = data
    return model, header["vocab"], header.get("extra", {})
