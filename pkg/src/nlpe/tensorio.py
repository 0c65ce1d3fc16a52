"""Binary tensor container.

Layout (little-endian)::

    "NLPE" | u16 version=1 | u32 count
    per tensor:
        u16 name_len | name (utf-8) | u8 format tag | u8 ndim | u32 dims[ndim]
        u32 block_size (0 = unblocked) | u16 bf16 scales[n_blocks] | payload

The payload length follows from dims and format (bit-packed, byte padded).
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from .numerics import (
    QuantParams,
    ScalarFormat,
    Tensor,
    decode_array,
    encode_array,
)

MAGIC = b"NLPE"
VERSION = 1


class TensorFileError(ValueError):
    pass


def _payload_len(numel: int, fmt: ScalarFormat) -> int:
    return -(-numel * fmt.bits // 8)


def dumps(tensors: Mapping[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", t.format.tag, len(t.dims)))
        buf.write(struct.pack(f"<{len(t.dims)}I", *t.dims))
        bs = 0
        scales = np.zeros(0)
        if t.params is not None and t.params.block_size is not None:
            bs = t.params.block_size
            scales = t.params.scales
        buf.write(struct.pack("<I", bs))
        codes = encode_array(scales, ScalarFormat.BF16)
        if not np.array_equal(decode_array(codes, ScalarFormat.BF16), scales):
            raise TensorFileError(f"{name}: scales are not BF16-representable")
        buf.write(codes.astype("<u2").tobytes())
        buf.write(t.payload)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, Tensor]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise TensorFileError("bad magic")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    off = 10
    out: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BB", view, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            (bs,) = struct.unpack_from("<I", view, off)
            off += 4
            fmt = ScalarFormat.from_tag(tag)
            numel = int(np.prod(dims))
            params = None
            if fmt is not ScalarFormat.REF:
                if bs:
                    n_blocks = -(-numel // bs)
                    codes = np.frombuffer(view, dtype="<u2", count=n_blocks, offset=off)
                    off += 2 * n_blocks
                    params = QuantParams(bs, decode_array(codes, ScalarFormat.BF16))
                else:
                    params = QuantParams(None)
            n = _payload_len(numel, fmt)
            if off + n > len(view):
                raise TensorFileError(f"{name}: truncated payload")
            out[name] = Tensor.from_payload(dims, fmt, bytes(view[off : off + n]), params)
            off += n
    except struct.error as exc:
        raise TensorFileError(f"truncated file: {exc}") from exc
    return out


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors: Mapping[str, Tensor]):
    atomic_write_bytes(path, dumps(tensors))


def load_tensors(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        return loads(f.read())
