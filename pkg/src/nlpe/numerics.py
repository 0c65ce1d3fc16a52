"""Scalar formats, SIMD word packing and block-wise quantization.

Every other module touches numeric values through this one. Formats:

    INT4  two's complement, [-8, 7]
    INT8  two's complement, [-128, 127]
    FP4   E2M1, bias 1, subnormals, no Inf/NaN   {0, 0.5, 1, 1.5, 2, 3, 4, 6}
    FP8   E4M3, bias 7, subnormals, single NaN (S.1111.111), no Inf, max 448
    BF16  E8M7, bias 127, IEEE semantics incl. Inf/NaN
    REF   wide binary real (float64 in memory, float32 on disk)

Encoding is round-to-nearest-even. FP4/FP8 saturate to max finite, BF16
overflows to Inf, integers clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

DEFAULT_BLOCK_SIZE = 64
SCALE_BYTES = 2  # one BF16 scale per block


@dataclass(frozen=True)
class FloatLayout:
    exp_bits: int
    mant_bits: int
    bias: int

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def exp_mask(self) -> int:
        return (1 << self.exp_bits) - 1

    @property
    def mant_mask(self) -> int:
        return (1 << self.mant_bits) - 1


class ScalarFormat(Enum):
    INT4 = "int4"
    INT8 = "int8"
    FP4 = "fp4"
    FP8 = "fp8"
    BF16 = "bf16"
    REF = "ref"

    @property
    def bits(self) -> int:
        # REF is accounted as an FP32 checkpoint value
        return _BITS[self]

    @property
    def tag(self) -> int:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "ScalarFormat":
        for f, t in _TAGS.items():
            if t == tag:
                return f
        raise ValueError(f"unknown format tag {tag}")

    @classmethod
    def parse(cls, name: str) -> "ScalarFormat":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown scalar format {name!r}") from None

    @property
    def is_float(self) -> bool:
        return self in _LAYOUTS

    @property
    def is_int(self) -> bool:
        return self in (ScalarFormat.INT4, ScalarFormat.INT8)

    @property
    def layout(self) -> FloatLayout:
        return _LAYOUTS[self]

    @property
    def max_finite(self) -> float:
        return _MAX_FINITE[self]

    @property
    def max_code_magnitude(self) -> float:
        """Largest magnitude a block-scaled value is mapped onto."""
        return _MAX_FINITE[self]


_BITS = {
    ScalarFormat.INT4: 4,
    ScalarFormat.INT8: 8,
    ScalarFormat.FP4: 4,
    ScalarFormat.FP8: 8,
    ScalarFormat.BF16: 16,
    ScalarFormat.REF: 32,
}
_TAGS = {
    ScalarFormat.INT4: 0,
    ScalarFormat.INT8: 1,
    ScalarFormat.FP4: 2,
    ScalarFormat.FP8: 3,
    ScalarFormat.BF16: 4,
    ScalarFormat.REF: 5,
}
_LAYOUTS = {
    ScalarFormat.FP4: FloatLayout(2, 1, 1),
    ScalarFormat.FP8: FloatLayout(4, 3, 7),
    ScalarFormat.BF16: FloatLayout(8, 7, 127),
}
_MAX_FINITE = {
    ScalarFormat.INT4: 7.0,
    ScalarFormat.INT8: 127.0,
    ScalarFormat.FP4: 6.0,
    ScalarFormat.FP8: 448.0,
    ScalarFormat.BF16: float.fromhex("0x1.fep127"),
    ScalarFormat.REF: float("inf"),
}
_INT_RANGE = {ScalarFormat.INT4: (-8, 7), ScalarFormat.INT8: (-128, 127)}

FP8_NAN = 0x7F
BF16_NAN = 0x7FC0


@dataclass(frozen=True)
class EncodedScalar:
    format: ScalarFormat
    bits: int

    def __post_init__(self):
        if self.format is ScalarFormat.REF:
            raise ValueError("REF values are not bit-encoded")
        if not 0 <= self.bits < (1 << self.format.bits):
            raise ValueError(f"{self.bits:#x} does not fit {self.format.value}")

    @property
    def value(self) -> float:
        return decode(self)


def _check_fmt(fmt: ScalarFormat):
    if fmt is ScalarFormat.REF:
        raise ValueError("REF has no bit encoding")


def decode_bits(bits: int, fmt: ScalarFormat) -> float:
    if fmt.is_int:
        w = fmt.bits
        return float(bits - (1 << w) if bits >> (w - 1) else bits)
    _check_fmt(fmt)
    lay = fmt.layout
    sign = -1.0 if (bits >> (lay.exp_bits + lay.mant_bits)) & 1 else 1.0
    e = (bits >> lay.mant_bits) & lay.exp_mask
    m = bits & lay.mant_mask
    if fmt is ScalarFormat.FP8 and e == lay.exp_mask and m == lay.mant_mask:
        return math.nan
    if fmt is ScalarFormat.BF16 and e == lay.exp_mask:
        return sign * math.inf if m == 0 else math.nan
    if e == 0:
        return sign * math.ldexp(m, lay.emin - lay.mant_bits)
    return sign * math.ldexp((1 << lay.mant_bits) | m, e - lay.bias - lay.mant_bits)


def decode(x: EncodedScalar) -> float:
    return decode_bits(x.bits, x.format)


def encode_bits(v: float, fmt: ScalarFormat) -> int:
    """Round-to-nearest-even encode of a real into ``fmt``'s bit pattern."""
    _check_fmt(fmt)
    v = float(v)
    if fmt.is_int:
        if not math.isfinite(v):
            raise ValueError(f"cannot encode {v} as {fmt.value}")
        lo, hi = _INT_RANGE[fmt]
        q = min(max(round(v), lo), hi)
        return q & ((1 << fmt.bits) - 1)

    lay = fmt.layout
    sign_bit = 1 << (lay.exp_bits + lay.mant_bits)
    if math.isnan(v):
        if fmt is ScalarFormat.FP8:
            return FP8_NAN
        if fmt is ScalarFormat.BF16:
            return BF16_NAN
        raise ValueError("FP4 has no NaN encoding")
    s = sign_bit if math.copysign(1.0, v) < 0 else 0
    a = abs(v)
    if math.isinf(a):
        return s | _overflow_code(fmt)
    if a == 0.0:
        return s
    _, e2 = math.frexp(a)
    E = max(e2 - 1, lay.emin)
    q = round(math.ldexp(a, lay.mant_bits - E))
    if q >> (lay.mant_bits + 1):
        q >>= 1
        E += 1
    if q == 0:
        return s
    if q < (1 << lay.mant_bits):
        return s | q
    field_ = E + lay.bias
    code = (field_ << lay.mant_bits) | (q & lay.mant_mask)
    if field_ > lay.exp_mask or (fmt is not ScalarFormat.BF16 and code > _max_code(fmt)):
        return s | _overflow_code(fmt)
    if fmt is ScalarFormat.BF16 and field_ == lay.exp_mask:
        return s | _overflow_code(fmt)
    return s | code


def _max_code(fmt: ScalarFormat) -> int:
    if fmt is ScalarFormat.FP8:
        return 0x7E
    if fmt is ScalarFormat.FP4:
        return 0x7
    return 0x7F7F


def _overflow_code(fmt: ScalarFormat) -> int:
    if fmt is ScalarFormat.BF16:
        return 0x7F80  # Inf
    return _max_code(fmt)


def encode(v: float, fmt: ScalarFormat) -> EncodedScalar:
    return EncodedScalar(fmt, encode_bits(v, fmt))


def quantize_value(v: float, fmt: ScalarFormat) -> float:
    """Nearest representable value (the encode/decode round trip)."""
    return decode_bits(encode_bits(v, fmt), fmt)


# -- vectorised paths ---------------------------------------------------------


@lru_cache(maxsize=None)
def decode_table(fmt: ScalarFormat) -> np.ndarray:
    """Value of every code of ``fmt``, indexed by code."""
    _check_fmt(fmt)
    if fmt is ScalarFormat.BF16:
        codes = np.arange(1 << 16, dtype=np.uint32)
        with np.errstate(invalid="ignore"):
            table = (codes << 16).view(np.float32).astype(np.float64)
    else:
        table = np.array([decode_bits(c, fmt) for c in range(1 << fmt.bits)])
    table.setflags(write=False)
    return table


def decode_array(codes, fmt: ScalarFormat) -> np.ndarray:
    return decode_table(fmt)[np.asarray(codes, dtype=np.int64)]


def encode_array(values, fmt: ScalarFormat) -> np.ndarray:
    """Vectorised :func:`encode_bits`; returns ``uint16`` codes."""
    _check_fmt(fmt)
    v = np.asarray(values, dtype=np.float64)
    if fmt.is_int:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"cannot encode non-finite values as {fmt.value}")
        lo, hi = _INT_RANGE[fmt]
        q = np.clip(np.rint(v), lo, hi).astype(np.int64)
        return (q & ((1 << fmt.bits) - 1)).astype(np.uint16)

    lay = fmt.layout
    nan = np.isnan(v)
    if fmt is ScalarFormat.FP4 and nan.any():
        raise ValueError("FP4 has no NaN encoding")
    sign = np.where(np.signbit(v), 1 << (lay.exp_bits + lay.mant_bits), 0).astype(np.int64)
    a = np.where(nan, 0.0, np.abs(v))
    inf = np.isinf(a)
    a = np.where(inf, 0.0, a)
    _, e2 = np.frexp(a)
    E = np.maximum(e2.astype(np.int64) - 1, lay.emin)
    q = np.rint(np.ldexp(a, (lay.mant_bits - E).astype(np.int32))).astype(np.int64)
    carry = (q >> (lay.mant_bits + 1)) > 0
    q = np.where(carry, q >> 1, q)
    E = E + carry
    normal = q >= (1 << lay.mant_bits)
    field_ = np.where(normal, E + lay.bias, 0)
    code = (field_ << lay.mant_bits) | np.where(normal, q & lay.mant_mask, q)
    if fmt is ScalarFormat.BF16:
        over = (field_ >= lay.exp_mask) | inf
    else:
        over = (code > _max_code(fmt)) | inf
    code = np.where(over, _overflow_code(fmt), code)
    code = code | sign
    if fmt is ScalarFormat.FP8:
        code = np.where(nan, FP8_NAN, code)
    elif fmt is ScalarFormat.BF16:
        code = np.where(nan, BF16_NAN, code)
    return code.astype(np.uint16)


def quantize_array(values, fmt: ScalarFormat) -> np.ndarray:
    return decode_array(encode_array(values, fmt), fmt)


def representable_values(fmt: ScalarFormat) -> np.ndarray:
    """Sorted unique finite values of ``fmt`` (signed zero collapsed)."""
    t = decode_table(fmt)
    return np.unique(t[np.isfinite(t)])


def local_gap(x, fmt: ScalarFormat) -> np.ndarray:
    """Spacing of the representable grid around ``x`` (the larger neighbour gap)."""
    grid = representable_values(fmt)
    x = np.clip(np.asarray(x, dtype=np.float64), grid[0], grid[-1])
    i = np.clip(np.searchsorted(grid, x), 1, len(grid) - 1)
    below = grid[i] - grid[i - 1]
    above = grid[np.minimum(i + 1, len(grid) - 1)] - grid[i]
    return np.maximum(below, above)


# -- SIMD words ---------------------------------------------------------------


class MacMode(Enum):
    """SIMD configuration of the 24-bit MAC datapath."""

    INT4X6 = "int4x6"
    FP4X6 = "fp4x6"
    FP8X3 = "fp8x3"
    BF16X1 = "bf16x1"

    @property
    def lane_format(self) -> ScalarFormat:
        return {
            MacMode.INT4X6: ScalarFormat.INT4,
            MacMode.FP4X6: ScalarFormat.FP4,
            MacMode.FP8X3: ScalarFormat.FP8,
            MacMode.BF16X1: ScalarFormat.BF16,
        }[self]

    @property
    def lane_count(self) -> int:
        return {MacMode.INT4X6: 6, MacMode.FP4X6: 6, MacMode.FP8X3: 3, MacMode.BF16X1: 1}[self]

    @property
    def lane_bits(self) -> int:
        return self.lane_format.bits

    @classmethod
    def parse(cls, name: str) -> "MacMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown MAC mode {name!r}") from None

    @classmethod
    def for_format(cls, fmt: ScalarFormat) -> "MacMode":
        for m in cls:
            if m.lane_format is fmt:
                return m
        raise ValueError(f"no MAC mode carries {fmt.value} lanes")


@dataclass(frozen=True)
class SimdWord24:
    raw: int
    mode: MacMode

    def __post_init__(self):
        if not 0 <= self.raw < (1 << 24):
            raise ValueError(f"raw word {self.raw:#x} exceeds 24 bits")
        used = self.mode.lane_count * self.mode.lane_bits
        if self.raw >> used:
            raise ValueError(f"bits above lane {self.mode.lane_count - 1} must be zero")

    def lane(self, i: int) -> int:
        w = self.mode.lane_bits
        return (self.raw >> (i * w)) & ((1 << w) - 1)


def pack(values: Sequence[EncodedScalar], mode: MacMode) -> SimdWord24:
    if len(values) != mode.lane_count:
        raise ValueError(f"{mode.value} takes {mode.lane_count} lanes, got {len(values)}")
    raw = 0
    for i, v in enumerate(values):
        if v.format is not mode.lane_format:
            raise ValueError(f"lane {i} is {v.format.value}, mode needs {mode.lane_format.value}")
        raw |= v.bits << (i * mode.lane_bits)
    return SimdWord24(raw, mode)


def unpack(w: SimdWord24) -> list[EncodedScalar]:
    fmt = w.mode.lane_format
    return [EncodedScalar(fmt, w.lane(i)) for i in range(w.mode.lane_count)]


def pack_codes(codes: np.ndarray, mode: MacMode) -> np.ndarray:
    """Pack a ``(..., lane_count)`` code array into 24-bit raw words."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[-1] != mode.lane_count:
        raise ValueError("last axis must equal the lane count")
    shifts = np.arange(mode.lane_count, dtype=np.int64) * mode.lane_bits
    return np.bitwise_or.reduce(codes << shifts, axis=-1)


def unpack_codes(raw: np.ndarray, mode: MacMode) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    shifts = np.arange(mode.lane_count, dtype=np.int64) * mode.lane_bits
    return (raw[..., None] >> shifts) & ((1 << mode.lane_bits) - 1)


# -- tensors ------------------------------------------------------------------


@dataclass(frozen=True)
class QuantParams:
    """Symmetric block scales. ``block_size=None`` means unit scale, no blocks."""

    block_size: int | None
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        s.setflags(write=False)
        object.__setattr__(self, "scales", s)
        if self.block_size is not None:
            if self.block_size < 1:
                raise ValueError("block_size must be >= 1")
            if np.any(s <= 0):
                raise ValueError("scales must be positive")
        elif s.size:
            raise ValueError("unblocked params carry no scales")

    def n_blocks(self) -> int:
        return len(self.scales)

    def expand(self, numel: int) -> np.ndarray:
        if self.block_size is None:
            return np.ones(numel)
        return np.repeat(self.scales, self.block_size)[:numel]


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major tensor: REF holds float64 values, other formats hold codes."""

    dims: tuple[int, ...]
    format: ScalarFormat
    data: np.ndarray
    params: QuantParams | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"bad dims {dims}")
        object.__setattr__(self, "dims", dims)
        dtype = np.float64 if self.format is ScalarFormat.REF else np.uint16
        data = np.array(self.data, dtype=dtype).reshape(dims)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.format is ScalarFormat.REF:
            if self.params is not None:
                raise ValueError("REF tensors carry no quantization params")
        else:
            if self.params is None:
                raise ValueError(f"{self.format.value} tensor needs QuantParams")
            if self.params.block_size is not None:
                want = -(-self.numel // self.params.block_size)
                if self.params.n_blocks() != want:
                    raise ValueError(f"expected {want} scales, got {self.params.n_blocks()}")
            if int(data.max(initial=0)) >> self.format.bits:
                raise ValueError("code exceeds format width")

    @classmethod
    def ref(cls, values) -> "Tensor":
        a = np.asarray(values, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1)
        return cls(a.shape, ScalarFormat.REF, a)

    @property
    def numel(self) -> int:
        return int(np.prod(self.dims))

    @property
    def payload(self) -> bytes:
        """Bit-packed little-endian payload, padded to a byte boundary."""
        flat = self.data.reshape(-1)
        if self.format is ScalarFormat.REF:
            return flat.astype("<f4").tobytes()
        if self.format.bits == 4:
            c = flat.astype(np.uint8)
            if c.size % 2:
                c = np.append(c, 0)
            return (c[0::2] | (c[1::2] << 4)).astype(np.uint8).tobytes()
        if self.format.bits == 8:
            return flat.astype(np.uint8).tobytes()
        return flat.astype("<u2").tobytes()

    @classmethod
    def from_payload(cls, dims, fmt: ScalarFormat, payload: bytes, params=None) -> "Tensor":
        numel = int(np.prod(dims))
        if fmt is ScalarFormat.REF:
            data = np.frombuffer(payload, dtype="<f4", count=numel).astype(np.float64)
        elif fmt.bits == 4:
            b = np.frombuffer(payload, dtype=np.uint8, count=-(-numel // 2))
            data = np.empty(b.size * 2, dtype=np.uint16)
            data[0::2] = b & 0xF
            data[1::2] = b >> 4
            data = data[:numel]
        elif fmt.bits == 8:
            data = np.frombuffer(payload, dtype=np.uint8, count=numel).astype(np.uint16)
        else:
            data = np.frombuffer(payload, dtype="<u2", count=numel).astype(np.uint16)
        return cls(tuple(dims), fmt, data.reshape(dims), params)

    def values(self) -> np.ndarray:
        """Real values (codes decoded and scaled)."""
        if self.format is ScalarFormat.REF:
            return np.array(self.data)
        return dequantize_tensor(self).data.copy()


def _round_scale_up(s: np.ndarray) -> np.ndarray:
    # Scales are stored as BF16; rounding up keeps |v/scale| within the code range.
    codes = encode_array(s, ScalarFormat.BF16).astype(np.int64)
    back = decode_array(codes, ScalarFormat.BF16)
    codes = np.where(back < s, codes + 1, codes)
    return decode_array(codes, ScalarFormat.BF16)


def block_scales(flat: np.ndarray, fmt: ScalarFormat, block_size: int) -> np.ndarray:
    n_blocks = -(-flat.size // block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = np.abs(flat)
    amax = padded.reshape(n_blocks, block_size).max(axis=1)
    scale = np.where(amax > 0, amax / fmt.max_code_magnitude, 1.0)
    return _round_scale_up(scale)


def quantize_tensor(t: Tensor, fmt: ScalarFormat, block_size: int = DEFAULT_BLOCK_SIZE) -> Tensor:
    """Symmetric block-wise quantisation of a REF tensor."""
    if t.format is not ScalarFormat.REF:
        raise ValueError("quantize_tensor expects a REF tensor")
    if fmt is ScalarFormat.REF:
        raise ValueError("target format must not be REF")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    flat = t.data.reshape(-1)
    if flat.size == 0:
        raise ValueError("empty tensor")
    if fmt is ScalarFormat.BF16:
        return Tensor(t.dims, fmt, encode_array(flat, fmt), QuantParams(None))
    scales = block_scales(flat, fmt, block_size)
    expanded = np.repeat(scales, block_size)[: flat.size]
    codes = encode_array(flat / expanded, fmt)
    return Tensor(t.dims, fmt, codes, QuantParams(block_size, scales))


def dequantize_tensor(t: Tensor) -> Tensor:
    if t.format is ScalarFormat.REF:
        return t
    vals = decode_array(t.data.reshape(-1), t.format) * t.params.expand(t.numel)
    return Tensor(t.dims, ScalarFormat.REF, vals)


def tensor_size_bytes(dims, fmt: ScalarFormat, block_size: int | None = None) -> int:
    """Storage bytes: bit-packed codes plus one BF16 scale per block."""
    dims = [dims] if np.isscalar(dims) else list(dims)
    if not dims:
        raise ValueError("dims must be nonempty")
    numel = math.prod(int(d) for d in dims)
    n_blocks = 0 if block_size is None else -(-numel // block_size)
    return -(-numel * fmt.bits // 8) + n_blocks * SCALE_BYTES
