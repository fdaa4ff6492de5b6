"""Checkpoint container.

Byte layout (little-endian)::

    magic        4 bytes  b"PCKP"
    version      u32      FORMAT_VERSION
    header_len   u64
    header       header_len bytes of UTF-8 JSON:
                   {"model_config": {...}, "state": {...},
                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      concatenated raw tensor bytes; offsets are relative to the
                 payload start. Parameters, buffers and optimizer moments are
                 stored as float32 ("<f4"); integer buffers as int64 ("<i8");
                 RNG state as bytes ("|u1").

Tensor names: ``model/<param>``, ``optim/<index>/<exp_avg|exp_avg_sq>`` and
``rng/torch``. ``state`` carries global step, seeds and any run metadata.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .model import ModelConfig, ReconstructionModel, build_model

MAGIC = b"PCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    state: dict = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None

    @property
    def step(self) -> int:
        return int(self.state.get("global_step", 0))

    def build(self, dtype: torch.dtype = torch.float32) -> ReconstructionModel:
        model = build_model(self.model_config, dtype)
        model.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v for k, v in self.model_state.items()})
        return model

    @classmethod
    def from_model(cls, model: ReconstructionModel, optimizer=None, **state) -> "ModelCheckpoint":
        return cls(
            model.cfg,
            {k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer.state_dict() if optimizer is not None else None,
            dict(state),
            torch.get_rng_state(),
        )


def _np_dtype(t: torch.Tensor) -> str:
    if t.dtype == torch.uint8:
        return "|u1"
    if t.is_floating_point():
        return "<f4"
    return "<i8"


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optimizer_state is not None:
        optim_meta = {"param_groups": ckpt.optimizer_state["param_groups"], "steps": {}}
        for idx, st in ckpt.optimizer_state["state"].items():
            for key, val in st.items():
                if key == "step":
                    optim_meta["steps"][str(idx)] = float(val)
                else:
                    tensors[f"optim/{idx}/{key}"] = val
    if ckpt.rng_state is not None:
        tensors["rng/torch"] = ckpt.rng_state

    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dt = _np_dtype(t)
        arr = np.ascontiguousarray(t.numpy().astype(dt))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"model_config": ckpt.model_config.to_dict(), "state": ckpt.state, "optimizer": optim_meta, "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> ModelCheckpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen :]
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if header["model_config"].get(k) != v)
        raise CheckpointError(f"{path}: model config mismatch in {diff}")

    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())

    model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = None
    if header.get("optimizer") is not None:
        meta = header["optimizer"]
        state: dict = {}
        for k, v in tensors.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = v
        for idx, step in meta["steps"].items():
            state.setdefault(int(idx), {})["step"] = torch.tensor(step)
        optim = {"state": state, "param_groups": meta["param_groups"]}
    return ModelCheckpoint(cfg, model_state, optim, header["state"], tensors.get("rng/torch"))
