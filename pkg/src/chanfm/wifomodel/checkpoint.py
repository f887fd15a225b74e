"""Checkpoint files: one JSON header line, then little-endian float32 values.

The header records the model config, a tensor index (name, shape, offset in
values, trainable flag), training provenance and the format version. Tensor
values follow in index order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numcore.tensor import Tensor
from .model import ModelConfig, WiFoModel

CHECKPOINT_VERSION = 1


@dataclass
class ParamCount:
    trainable: int
    total: int

    @property
    def trainable_m(self) -> float:
        return self.trainable / 1e6

    @property
    def total_m(self) -> float:
        return self.total / 1e6

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def __str__(self) -> str:
        return f"{self.trainable}/{self.total} ({self.trainable_m:.4f}M/{self.total_m:.4f}M)"


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    provenance: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: WiFoModel, trainable: dict[str, bool] | None = None) -> "Checkpoint":
        flags = dict(model.trainable if trainable is None else trainable)
        return cls(
            config=model.config,
            tensors={n: p.data.astype(np.float32, copy=True) for n, p in model.params.items()},
            trainable={n: bool(flags.get(n, False)) for n in model.params},
            provenance=json.loads(json.dumps(model.provenance)),
        )

    def to_model(self, dtype=np.float32) -> WiFoModel:
        params = {n: Tensor(v.astype(dtype, copy=True), requires_grad=True, name=n) for n, v in self.tensors.items()}
        model = WiFoModel(self.config, params)
        model.trainable = dict(self.trainable)
        model.provenance = json.loads(json.dumps(self.provenance))
        return model

    def param_count(self) -> ParamCount:
        return param_count(self)

    def to_bytes(self) -> bytes:
        index, offset = [], 0
        for name, arr in self.tensors.items():
            index.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "trainable": bool(self.trainable[name]),
            })
            offset += arr.size
        header = {
            "format_version": self.format_version,
            "model_config": self.config.to_dict(),
            "tensors": index,
            "n_values": offset,
            "provenance": self.provenance,
        }
        line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return line + blob

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        values = np.frombuffer(raw, dtype="<f4", offset=nl + 1)
        if values.size != header["n_values"]:
            raise ValueError(f"checkpoint holds {values.size} values, header declares {header['n_values']}")
        tensors, trainable = {}, {}
        for entry in header["tensors"]:
            name = entry["name"]
            if name in tensors:
                raise ValueError(f"duplicate tensor name {name!r}")
            size = int(np.prod(entry["shape"], dtype=np.int64))
            tensors[name] = values[entry["offset"]: entry["offset"] + size].reshape(entry["shape"]).astype(np.float32)
            trainable[name] = bool(entry["trainable"])
        return cls(
            config=ModelConfig.from_dict(header["model_config"]),
            tensors=tensors,
            trainable=trainable,
            provenance=header.get("provenance", {}),
            format_version=header["format_version"],
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def param_count(checkpoint) -> ParamCount:
    """Trainable and total parameter counts from a checkpoint or model."""
    if isinstance(checkpoint, WiFoModel):
        return ParamCount(*checkpoint.param_count())
    total = sum(a.size for a in checkpoint.tensors.values())
    trainable = sum(a.size for n, a in checkpoint.tensors.items() if checkpoint.trainable.get(n))
    return ParamCount(trainable, total)
