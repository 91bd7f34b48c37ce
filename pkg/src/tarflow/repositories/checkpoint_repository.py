"""Checkpoint persistence.

Binary layout, all integers little-endian:

    b"TFCK" | u32 version | u32 header length | JSON header (UTF-8,
    sorted keys) | u32 record count | records sorted by name

    record: u32 name length | name | u8 dtype (0 float32, 1 float64) |
            u32 ndim | u32 dims... | raw little-endian values

Optimizer moments are records named `optimizer.m.<param>` and
`optimizer.v.<param>`.
"""

import abc
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tarflow.entities.config import ModelConfig
from tarflow.errors import CheckpointFormatError
from tarflow.flow.model import TarFlowModel
from tarflow.numerics import Tensor
from tarflow.training.optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"TFCK"
FORMAT_VERSION = 1
SUFFIX = ".tfck"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_M_PREFIX = "optimizer.m."
_V_PREFIX = "optimizer.v."


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = Field(default=FORMAT_VERSION)
    config: ModelConfig
    tensors: dict[str, np.ndarray] = Field(
        description="Model parameters by dotted name."
    )
    optimizer: OptimizerState | None = None
    rng_state: dict[str, Any] | None = Field(
        default=None, description="numpy bit generator state."
    )
    step: int = Field(default=0, ge=0)
    epoch: int = Field(default=0, ge=0)
    best_loss: float | None = None

    @classmethod
    def from_model(cls, model: TarFlowModel, **kwargs) -> "Checkpoint":
        tensors = {k: t.numpy() for k, t in model.named_tensors().items()}
        return cls(config=model.config, tensors=tensors, **kwargs)

    def to_model(self) -> TarFlowModel:
        model = TarFlowModel.init(self.config)
        expected = model.named_tensors()
        missing = sorted(set(expected) - set(self.tensors))
        if missing:
            raise CheckpointFormatError(
                f"checkpoint lacks parameters {missing[:3]}", 0
            )
        return model.with_tensors(
            {k: Tensor(v) for k, v in self.tensors.items() if k in expected}
        )


def _header(ckpt: Checkpoint) -> dict[str, Any]:
    optimizer = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        optimizer = {
            "step": opt.step,
            "betas": list(opt.betas),
            "weight_decay": opt.weight_decay,
            "eps": opt.eps,
            "base_lr": opt.base_lr,
        }
    return {
        "format_version": ckpt.version,
        "model_config": ckpt.config.model_dump(mode="json"),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "best_loss": ckpt.best_loss,
        "rng_state": ckpt.rng_state,
        "optimizer": optimizer,
    }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        _header(ckpt), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    records = dict(ckpt.tensors)
    if ckpt.optimizer is not None:
        for name, value in ckpt.optimizer.m.items():
            records[_M_PREFIX + name] = value
        for name, value in ckpt.optimizer.v.items():
            records[_V_PREFIX + name] = value
    out = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header]
    out.append(struct.pack("<I", len(records)))
    for name in sorted(records):
        value = np.asarray(records[name])
        code = _CODES.get(value.dtype)
        if code is None:
            raise CheckpointFormatError(
                f"tensor '{name}' has unsupported dtype {value.dtype}", 0
            )
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BI", code, value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(value.astype(_DTYPES[code], copy=False).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint while reading {what}", self.offset
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, expected b'TFCK'", 0)
    version, header_len = reader.unpack("<II", "version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}", 4
        )
    start = reader.offset
    try:
        header = json.loads(reader.take(header_len, "header"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(
            f"malformed header: {err}", start
        ) from None
    (count,) = reader.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
    for _ in range(count):
        record_start = reader.offset
        (name_len,) = reader.unpack("<I", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        code, ndim = reader.unpack("<BI", f"'{name}' dtype")
        if code not in _DTYPES:
            raise CheckpointFormatError(
                f"unknown dtype code {code} for '{name}'", record_start
            )
        shape = reader.unpack(f"<{ndim}I", f"'{name}' shape")
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f"'{name}' values")
        value = np.frombuffer(raw, dtype=dtype).reshape(shape)
        value = value.astype(dtype.newbyteorder("="))
        if name.startswith(_M_PREFIX):
            moments["m"][name[len(_M_PREFIX) :]] = value
        elif name.startswith(_V_PREFIX):
            moments["v"][name[len(_V_PREFIX) :]] = value
        else:
            tensors[name] = value
    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes", reader.offset)
    optimizer = None
    if header.get("optimizer") is not None:
        opt = header["optimizer"]
        optimizer = OptimizerState(
            step=opt["step"],
            m=moments["m"],
            v=moments["v"],
            betas=tuple(opt["betas"]),
            weight_decay=opt["weight_decay"],
            eps=opt["eps"],
            base_lr=opt["base_lr"],
        )
    return Checkpoint(
        version=header["format_version"],
        config=ModelConfig.model_validate(header["model_config"]),
        tensors=tensors,
        optimizer=optimizer,
        rng_state=header["rng_state"],
        step=header["step"],
        epoch=header["epoch"],
        best_loss=header["best_loss"],
    )


class AbstractCheckpointRepository(abc.ABC):
    @abc.abstractmethod
    def save(self, name: str, checkpoint: Checkpoint) -> None:
        pass

    @abc.abstractmethod
    def load(self, name: str) -> Checkpoint:
        pass

    @abc.abstractmethod
    def list_checkpoints(self) -> list[str]:
        pass

    @abc.abstractmethod
    def exists(self, name: str) -> bool:
        pass


class FileCheckpointRepository(AbstractCheckpointRepository):
    """One `<name>.tfck` file per checkpoint under `root`."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(self, name: str) -> Path:
        return self.root / f"{name}{SUFFIX}"

    def save(self, name: str, checkpoint: Checkpoint) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(name)
        tmp = path.with_suffix(SUFFIX + ".tmp")
        tmp.write_bytes(encode_checkpoint(checkpoint))
        tmp.replace(path)
        logger.info(
            f"[checkpoint] wrote {path} (step {checkpoint.step}, "
            f"epoch {checkpoint.epoch})"
        )

    def load(self, name: str) -> Checkpoint:
        path = self.path_for(name)
        logger.debug(f"[checkpoint] reading {path}")
        return decode_checkpoint(path.read_bytes())

    def list_checkpoints(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.stem for p in self.root.glob(f"*{SUFFIX}"))

    def exists(self, name: str) -> bool:
        return self.path_for(name).exists()

    @classmethod
    def for_file(cls, path: Path) -> tuple["FileCheckpointRepository", str]:
        """Repository and checkpoint name addressing an existing file."""
        path = Path(path)
        return cls(path.parent), path.name.removesuffix(SUFFIX)
