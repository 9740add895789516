"""Single-file checkpoint archive.

Layout::

    PHENDIFF-CKPT 1\\n
    <header byte length, decimal ASCII>\\n
    <header: UTF-8 JSON, sorted keys, 2-space indent>\\n
    <tensor payload>

The header carries ``denoiser`` (config), ``schedule`` (T, beta_start,
beta_end), ``conditions`` (names in index order), ``step``, ``kind`` and
``tensors``: a list of ``{"name", "shape", "offset", "nbytes"}`` entries in
payload order. Every tensor is stored as contiguous little-endian float32 with
``offset`` counted from the first payload byte.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditionalDenoiser, DenoiserConfig
from .schedule import NoiseSchedule, build_schedule

MAGIC = b"PHENDIFF-CKPT 1\n"


@dataclass
class Checkpoint:
    config: DenoiserConfig
    schedule: NoiseSchedule
    conditions: list[str]
    state: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    kind: str = "live"
    extra: dict = field(default_factory=dict)

    def build_model(self) -> ConditionalDenoiser:
        model = ConditionalDenoiser(self.config)
        model.load_state_dict(self.state)
        return model.eval()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, tensor in ckpt.state.items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        data = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    header = {
        "format": "phendiff-checkpoint",
        "version": 1,
        "denoiser": ckpt.config.to_dict(),
        "schedule": ckpt.schedule.params(),
        "conditions": list(ckpt.conditions),
        "step": int(ckpt.step),
        "kind": ckpt.kind,
        "extra": ckpt.extra,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True, indent=2).encode("utf-8") + b"\n"
    return MAGIC + f"{len(header_bytes)}\n".encode("ascii") + header_bytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise ValueError("not a phendiff checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = blob.index(b"\n", pos)
    header_len = int(blob[pos:nl])
    header = json.loads(blob[nl + 1 : nl + 1 + header_len].decode("utf-8"))
    payload = memoryview(blob)[nl + 1 + header_len :]

    state = OrderedDict()
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"checkpoint truncated while reading {entry['name']}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))

    sched = header["schedule"]
    return Checkpoint(
        config=DenoiserConfig.from_dict(header["denoiser"]),
        schedule=build_schedule(sched["T"], sched["beta_start"], sched["beta_end"]),
        conditions=list(header["conditions"]),
        state=state,
        step=int(header["step"]),
        kind=header.get("kind", "live"),
        extra=header.get("extra", {}),
    )


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def checkpoint_from_model(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    conditions: list[str],
    step: int = 0,
    kind: str = "live",
    extra: dict | None = None,
) -> Checkpoint:
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return Checkpoint(model.config, schedule, list(conditions), state, step, kind, dict(extra or {}))
