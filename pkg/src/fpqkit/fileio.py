"""Binary tensor containers and deterministic text artifacts.

The tensor container is magic "FPQT", version, rank, u64 dims, then the
payload as little-endian 32-bit reals in row-major order.  The quantized
container "FPQZ" adds the format name and group layout, stores group
maxvals as 32-bit reals, and packs 4-bit codes two per byte (wider codes
go as signed bytes).

CSV and JSON writers normalize float formatting (shortest round-trip repr)
and key order so identical inputs always produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DecodeError
from .formats import FpFormat, parse_format
from .quantize import QuantizedTensor

MAGIC_TENSOR = b"FPQT"
MAGIC_QUANT = b"FPQZ"
VERSION = 1


def write_fpqt(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC_TENSOR)
        f.write(struct.pack("<HH", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def _from_buffer(raw: bytes, dtype, count: int, offset: int, path) -> np.ndarray:
    need = offset + count * np.dtype(dtype).itemsize
    if len(raw) < need:
        raise DecodeError(f"{path}: truncated payload "
                          f"({len(raw)} bytes, need {need})")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset)


def read_fpqt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_TENSOR:
        raise DecodeError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, rank = struct.unpack_from("<HH", raw, 4)
        if version != VERSION:
            raise DecodeError(f"{path}: unsupported version {version}")
        dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    except struct.error as e:
        raise DecodeError(f"{path}: truncated header") from e
    off = 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = _from_buffer(raw, "<f4", count, off, path)
    return data.reshape(dims).astype(np.float32)


def _pack_nibbles(codes: np.ndarray) -> bytes:
    """Signed 4-bit codes biased by +8, two per byte, high nibble first."""
    flat = codes.reshape(-1).astype(np.int16) + 8
    if flat.min(initial=8) < 1 or flat.max(initial=8) > 15:
        raise ConfigError("codes do not fit in a signed nibble")
    if flat.size % 2:
        flat = np.concatenate([flat, [0]])
    pairs = flat.reshape(-1, 2)
    return ((pairs[:, 0] << 4) | pairs[:, 1]).astype(np.uint8).tobytes()


def _unpack_nibbles(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    flat = np.empty(b.size * 2, dtype=np.int16)
    flat[0::2] = b >> 4
    flat[1::2] = b & 0x0F
    return (flat[:count] - 8).astype(np.int32)


def write_quantized(path, q: QuantizedTensor) -> None:
    if not isinstance(q.fmt, FpFormat):
        raise ConfigError("only FP-format tensors are serializable")
    name = q.fmt.name.encode()
    mv = np.ascontiguousarray(q.group_maxvals, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC_QUANT)
        f.write(struct.pack("<HB", VERSION, len(name)))
        f.write(name)
        f.write(struct.pack("<IB", q.group_size or 0, 255 if q.group_axis is None else q.group_axis))
        f.write(struct.pack("<H", len(q.shape)))
        f.write(struct.pack(f"<{len(q.shape)}Q", *q.shape))
        f.write(struct.pack("<QQ", *mv.shape))
        f.write(mv.tobytes())
        if q.fmt.bits == 4:
            f.write(_pack_nibbles(q.codes))
        else:
            f.write(q.codes.astype(np.int8).tobytes())


def read_quantized(path) -> QuantizedTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_QUANT:
        raise DecodeError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, name_len = struct.unpack_from("<HB", raw, 4)
        if version != VERSION:
            raise DecodeError(f"{path}: unsupported version {version}")
        off = 7
        name = raw[off:off + name_len].decode()
        off += name_len
        group_size, group_axis = struct.unpack_from("<IB", raw, off)
        off += 5
        (rank,) = struct.unpack_from("<H", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        mv_shape = struct.unpack_from("<QQ", raw, off)
        off += 16
    except (struct.error, UnicodeDecodeError) as e:
        raise DecodeError(f"{path}: truncated header") from e
    mv_count = mv_shape[0] * mv_shape[1]
    maxvals = _from_buffer(raw, "<f4", mv_count, off, path)
    off += 4 * mv_count
    fmt = parse_format(name)
    count = int(np.prod(shape, dtype=np.int64))
    if fmt.bits == 4:
        if len(raw) - off < (count + 1) // 2:
            raise DecodeError(f"{path}: truncated code payload")
        codes = _unpack_nibbles(raw[off:], count)
    else:
        codes = _from_buffer(raw, np.int8, count, off, path).astype(np.int32)
    return QuantizedTensor(codes=codes.reshape(shape), fmt=fmt, shape=tuple(shape),
                           group_size=group_size or None,
                           group_axis=None if group_axis == 255 else group_axis,
                           group_maxvals=maxvals.astype(np.float64).reshape(mv_shape))


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    """UTF-8 CSV, header row, '.' decimal separator, round-trip float repr."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(x) for x in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
