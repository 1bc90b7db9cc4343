"""Binary checkpoint container.

Layout: an 8-byte little-endian length, a JSON header, the parameter tensors
raveled as little-endian float32 in canonical order, then an 8-byte checksum
(BLAKE2b-64) of the payload. Full checkpoints carry every model tensor; LoRA
checkpoints carry only the adapter matrices plus their spec in the header.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, Params, init_model, param_shapes


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _tensor_names(params: Params, lora_only: bool) -> list[str]:
    if lora_only:
        return [n for n in params.names() if ".lora_" in n]
    return params.names()


def save_checkpoint(path, params: Params, step: int = 0, lora_only: bool = False) -> None:
    from .adapters import LoraSpec  # local import, adapters depends on model

    if lora_only and params.lora is None:
        raise CheckpointError("lora_only=True but no adapter is attached")
    names = _tensor_names(params, lora_only)
    header = {
        "kind": "lora" if lora_only else "full",
        "config": dataclasses.asdict(params.config),
        "step": int(step),
        "names": names,
    }
    if params.lora is not None:
        header["lora"] = dataclasses.asdict(params.lora)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(params[n].data, dtype="<f4").tobytes() for n in names
    )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(_checksum(payload))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path, base: Optional[Params] = None) -> tuple[Params, int]:
    """Load a checkpoint; LoRA containers require ``base`` params to attach onto."""
    from .adapters import LoraSpec, attach_lora

    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = raw[8 + hlen : -8]
    if _checksum(payload) != raw[-8:]:
        raise CheckpointError(f"checkpoint {path} failed its checksum")

    config = ModelConfig(**header["config"])
    if header["kind"] == "full":
        params = init_model(config)
        if "lora" in header:
            params = attach_lora(params, LoraSpec(**header["lora"]))
    else:
        if base is None:
            raise CheckpointError("LoRA checkpoint needs base params to attach onto")
        if dataclasses.asdict(base.config) != header["config"]:
            raise CheckpointError("LoRA checkpoint config does not match base params")
        params = attach_lora(base, LoraSpec(**header["lora"]))

    names = header["names"]
    offset = 0
    for name in names:
        t = params[name]
        nbytes = t.size * 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"checkpoint {path} payload too short at {name}")
        t.data = np.frombuffer(chunk, dtype="<f4").reshape(t.data.shape).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"checkpoint {path} has {len(payload) - offset} trailing payload bytes")
    return params, int(header.get("step", 0))
