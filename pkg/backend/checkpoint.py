# backend/checkpoint.py
import copy
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .tensor import DTYPES, dtype_name
from .transformer import ConfigError, ModelConfig, ParamSet, ParamShapeError, check_params, count_params, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"CBDC"
VERSION = 1
ALIGN = 8
_PREAMBLE = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base error for checkpoint persistence"""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


@dataclass
class Provenance:
    """Who made a checkpoint: name, append-only lineage, seed, creation step count"""
    name: str = ""
    lineage: List[Dict[str, Any]] = field(default_factory=list)
    seed: Optional[int] = None
    step: int = 0

    def with_stage(self, stage: str, name: Optional[str] = None, step: Optional[int] = None,
                   seed: Optional[int] = None, **details) -> "Provenance":
        entry = {"stage": stage}
        entry.update(details)
        return Provenance(
            name=self.name if name is None else name,
            lineage=copy.deepcopy(self.lineage) + [entry],
            seed=self.seed if seed is None else seed,
            step=self.step if step is None else step,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "lineage": self.lineage, "seed": self.seed, "step": self.step}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Provenance":
        return cls(name=data.get("name", ""), lineage=list(data.get("lineage", [])),
                   seed=data.get("seed"), step=int(data.get("step", 0)))


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    meta: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        ordered = OrderedDict()
        for name in param_shapes(self.config):
            if name in self.params:
                ordered[name] = self.params[name]
        for name in self.params:
            if name not in ordered:
                ordered[name] = self.params[name]
        self.params = ordered

    @property
    def name(self) -> str:
        return self.meta.name

    @property
    def n_params(self) -> int:
        return count_params(self.config)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def validate(self):
        try:
            check_params(self.config, self.params)
        except ParamShapeError as e:
            raise ShapeMismatchError(str(e)) from None
        for name, arr in self.params.items():
            if arr.dtype not in (np.float32, np.float64):
                raise ShapeMismatchError(f"{name}: unsupported dtype {arr.dtype}")

    def with_params(self, params: ParamSet, meta: Provenance) -> "Checkpoint":
        return Checkpoint(self.config, params, meta)


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _header_bytes(ckpt: Checkpoint) -> Tuple[bytes, List[bytes]]:
    entries, payloads = [], []
    offset = 0
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype_name(arr.dtype),
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_len": len(raw),
        })
        payloads.append(raw)
        offset += len(raw) + _pad(len(raw))
    header = {"config": ckpt.config.to_dict(), "meta": ckpt.meta.to_dict(), "tensors": entries}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8"), payloads


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    header, payloads = _header_bytes(ckpt)
    parts = [_PREAMBLE.pack(MAGIC, VERSION, len(header)), header]
    for raw in payloads:
        parts.append(raw)
        parts.append(b"\x00" * _pad(len(raw)))
    return b"".join(parts)


def save(ckpt: Checkpoint, path: str):
    """Write a CBDC file; the same checkpoint always yields the same bytes"""
    data = to_bytes(ckpt)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Error saving checkpoint {path}: {e}")
        raise
    logger.info(f"saved {ckpt.name or 'checkpoint'} ({count_params(ckpt.config)} params) to {path}")


def _parse_preamble(buf: bytes, path: str) -> Tuple[Dict[str, Any], int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a CBDC checkpoint")
    if len(buf) < _PREAMBLE.size:
        raise TruncatedDataError(f"{path}: truncated preamble")
    _, version, header_len = _PREAMBLE.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version} (expected {VERSION})")
    end = _PREAMBLE.size + header_len
    if len(buf) < end:
        raise TruncatedDataError(f"{path}: truncated header ({len(buf) - _PREAMBLE.size} of {header_len} bytes)")
    try:
        header = json.loads(buf[_PREAMBLE.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: unreadable header ({e})")
    if not isinstance(header, dict) or not {"config", "meta", "tensors"} <= set(header):
        raise HeaderError(f"{path}: header lacks config/meta/tensors")
    return header, end


def read_header(path: str) -> Dict[str, Any]:
    """Config, meta and tensor table of a checkpoint without reading payloads"""
    with open(path, "rb") as fh:
        head = fh.read(_PREAMBLE.size)
        if len(head) >= 4 and head[:4] == MAGIC and len(head) == _PREAMBLE.size:
            _, _, header_len = _PREAMBLE.unpack(head)
            head += fh.read(header_len)
    header, _ = _parse_preamble(head, path)
    return header


_ENTRY_KEYS = ("name", "dtype", "shape", "byte_offset", "byte_len")


def _is_count(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _tensor_entry(entry: Any, path: str) -> Tuple[str, str, Tuple[int, ...], int, int]:
    """Checked (name, dtype, shape, byte_offset, byte_len) of one tensor-table row"""
    if not isinstance(entry, dict) or not set(_ENTRY_KEYS) <= set(entry):
        raise HeaderError(f"{path}: tensor entry lacks one of {', '.join(_ENTRY_KEYS)}")
    name, dtype, shape = entry["name"], entry["dtype"], entry["shape"]
    if not isinstance(name, str):
        raise HeaderError(f"{path}: tensor name {name!r} is not a string")
    if not isinstance(dtype, str) or dtype not in DTYPES:
        raise HeaderError(f"{path}: tensor {name} has unknown dtype {dtype!r}")
    if not isinstance(shape, list) or not all(_is_count(s) for s in shape):
        raise HeaderError(f"{path}: tensor {name} has malformed shape {shape!r}")
    offset, length = entry["byte_offset"], entry["byte_len"]
    if not _is_count(offset) or not _is_count(length):
        raise HeaderError(f"{path}: tensor {name} has invalid byte range ({offset!r}, {length!r})")
    return name, dtype, tuple(shape), offset, length


def from_bytes(buf: bytes, path: str = "<bytes>") -> Checkpoint:
    header, start = _parse_preamble(buf, path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except ConfigError as e:
        raise ShapeMismatchError(f"{path}: invalid config ({e})")
    if not isinstance(header["tensors"], list):
        raise HeaderError(f"{path}: tensor table is not a list")
    if not isinstance(header["meta"], dict):
        raise HeaderError(f"{path}: meta is not an object")
    payload = memoryview(buf)[start:]
    params: ParamSet = OrderedDict()
    for entry in header["tensors"]:
        name, dtype, shape, offset, length = _tensor_entry(entry, path)
        np_dtype = np.dtype(DTYPES[dtype]).newbyteorder("<")
        if length != int(np.prod(shape)) * np_dtype.itemsize:
            raise ShapeMismatchError(f"{path}: tensor {name} byte length {length} does not match shape {shape}")
        if offset + length > len(payload):
            raise TruncatedDataError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(payload[offset:offset + length], dtype=np_dtype).reshape(shape)
        params[name] = arr.astype(DTYPES[dtype])
    try:
        meta = Provenance.from_dict(header["meta"])
    except (TypeError, ValueError) as e:
        raise HeaderError(f"{path}: malformed meta ({e})") from None
    ckpt = Checkpoint(config, params, meta)
    try:
        ckpt.validate()
    except ShapeMismatchError as e:
        raise ShapeMismatchError(f"{path}: {e}") from None
    return ckpt


def load(path: str) -> Checkpoint:
    """Read and validate a CBDC file"""
    with open(path, "rb") as fh:
        buf = fh.read()
    ckpt = from_bytes(buf, path)
    logger.debug(f"loaded {path}: {len(ckpt.params)} tensors, lineage depth {len(ckpt.meta.lineage)}")
    return ckpt


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise equality of config, meta and every tensor"""
    if a.config != b.config or a.meta.to_dict() != b.meta.to_dict() or list(a.params) != list(b.params):
        return False
    return all(a.params[n].dtype == b.params[n].dtype and a.params[n].tobytes() == b.params[n].tobytes()
               for n in a.params)
