"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"UAPCKPT1" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype tag | u8 rank | u32 dims[rank] | payload

Run metadata (model config, its hash, iteration, RNG state) is stored as a
JSON document in a ``uint8`` entry named ``__meta__``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import Model, ModelConfig, init_params

MAGIC = b"UAPCKPT1"
VERSION = 1
META = "__meta__"

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TAG_OF = {dt: tag for tag, dt in _TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str | None:
        return self.meta.get("config_hash")


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode()
        entries[META] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = _TAG_OF.get(np.dtype(dt))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    off = 8
    try:
        version, n = struct.unpack_from("<II", data, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        meta: dict = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            tag, rank = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _TAGS[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(data):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
            if name == META:
                meta = json.loads(arr.tobytes().decode())
            else:
                tensors[name] = arr
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    return Checkpoint(tensors, meta)


def save(path: str | os.PathLike, model: Model, iteration: int = 0, rng_state=None,
         extra: Mapping | None = None) -> Path:
    meta = {"model_config": model.cfg.to_dict(), "config_hash": model.cfg.hash(),
            "iteration": int(iteration), "rng_state": rng_state}
    if extra:
        meta.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model.params.state(), _jsonable(meta)))
    return path


def load(path: str | os.PathLike, expect_hash: str | None = None, force: bool = False) -> tuple[Model, Checkpoint]:
    """Rebuild a model from a checkpoint file.

    A mismatch between ``expect_hash`` and the stored config hash raises
    :class:`CheckpointError` unless ``force`` is set.
    """
    ck = decode(Path(path).read_bytes())
    if expect_hash is not None and ck.config_hash != expect_hash and not force:
        raise CheckpointError(f"config hash mismatch: checkpoint {ck.config_hash}, expected {expect_hash}")
    cfg_d = dict(ck.meta.get("model_config", {}))
    if "tasks" in cfg_d:
        cfg_d["tasks"] = tuple(cfg_d["tasks"])
    cfg = ModelConfig(**cfg_d)
    params = init_params(cfg, 0)
    params.load_state(ck.tensors)
    return Model(cfg, params), ck


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
