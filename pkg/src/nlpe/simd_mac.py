"""Bit-accurate model of the five-stage SIMD multiply-accumulate datapath.

One issue carries two 24-bit operand words and an optional addend. Per issue:

1. decode lanes, multiply significands on 4-bit RMMEC blocks (nibble
   partial products with positional weights), XOR the signs;
2. take the maximum exponent over lane products, addend and quire;
3. right-shift every significand onto a window of ``W + 4`` fractional bits
   below that maximum, discarding what falls off (truncation);
4. add the aligned signed terms exactly;
5. renormalise by leading-zero count and range-check the quire exponent.

All arithmetic is on integers. The kernel works on batches of independent
quires so the systolic array and the quantised transformer can run thousands
of dot products in lock-step; the scalar API wraps a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .numerics import (
    EncodedScalar,
    MacMode,
    ScalarFormat,
    SimdWord24,
    encode_array,
    encode_bits,
)

__all__ = [
    "MacMode",
    "RmmecMode",
    "RmmecConfig",
    "QuireConfig",
    "Quire",
    "MacIssue",
    "MacResult",
    "QuireBatch",
    "rmmec_multiply",
    "rmmec_compare",
    "rmmec_assignment",
    "mac_step",
    "mac_step_batch",
    "quire_read",
    "quire_read_batch",
    "dot_product",
    "dot_product_codes",
    "mac_cycles",
    "PIPELINE_DEPTH",
    "GUARD_BITS",
]

PIPELINE_DEPTH = 5
GUARD_BITS = 4


class RmmecMode(Enum):
    MULTIPLY = "multiply"
    EXP_COMPARE = "exp_compare"


@dataclass(frozen=True)
class RmmecConfig:
    block_mode: RmmecMode


def rmmec_assignment(mode: MacMode) -> tuple[RmmecConfig, ...]:
    """Role of each block of the 2x3 RMMEC array for ``mode``."""
    n_mul = {MacMode.BF16X1: 4, MacMode.FP8X3: 3, MacMode.FP4X6: 6, MacMode.INT4X6: 6}[mode]
    return tuple(
        RmmecConfig(RmmecMode.MULTIPLY if i < n_mul else RmmecMode.EXP_COMPARE) for i in range(6)
    )


def rmmec_multiply(x, y, config: RmmecConfig | None = None):
    """4-bit x 4-bit unsigned product (8-bit result). Works on arrays."""
    if config is not None and config.block_mode is not RmmecMode.MULTIPLY:
        raise ValueError("block is configured as an exponent comparator")
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.any((x < 0) | (x > 15) | (y < 0) | (y > 15)):
        raise ValueError("RMMEC operands are 4-bit unsigned")
    p = x * y
    return int(p) if p.ndim == 0 else p


def rmmec_compare(exps: Sequence[int], config: RmmecConfig | None = None):
    """Maximum of up to three exponents and each input's distance below it."""
    if config is not None and config.block_mode is not RmmecMode.EXP_COMPARE:
        raise ValueError("block is configured as a multiplier")
    exps = [int(e) for e in exps]
    if not 1 <= len(exps) <= 3:
        raise ValueError("comparator takes 1..3 exponents")
    m = max(exps)
    return m, tuple(m - e for e in exps)


def _nibble_product(sa: np.ndarray, sb: np.ndarray, nibbles: int) -> np.ndarray:
    """Significand product assembled from 4-bit partial products."""
    acc = np.zeros(np.broadcast(sa, sb).shape, dtype=np.int64)
    for i in range(nibbles):
        ai = (sa >> (4 * i)) & 0xF
        for j in range(nibbles):
            bj = (sb >> (4 * j)) & 0xF
            acc += (ai * bj) << (4 * (i + j))  # one RMMEC multiply per nibble pair
    return acc


# -- quire --------------------------------------------------------------------


@dataclass(frozen=True)
class QuireConfig:
    out_format: ScalarFormat
    width: int  # W: 8 or 16 fractional mantissa bits
    exp_bits: int  # 4 or 8

    @classmethod
    def for_output(cls, out: ScalarFormat) -> "QuireConfig":
        if out is ScalarFormat.FP8:
            return cls(out, 8, 4)
        if out is ScalarFormat.BF16:
            return cls(out, 16, 8)
        raise ValueError("MAC output must be FP8 or BF16")

    @property
    def frac_bits(self) -> int:
        return self.width + GUARD_BITS

    @property
    def exp_bias(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def exp_min(self) -> int:
        return -self.exp_bias

    @property
    def exp_max(self) -> int:
        return (1 << self.exp_bits) - 1 - self.exp_bias


@dataclass
class Quire:
    """Accumulator: value = sign * mant * 2**(exp - F), mant normalised to [2**F, 2**(F+1))."""

    config: QuireConfig
    sign: int = 1
    mant: int = 0
    exp: int = 0
    exception: bool = False

    @classmethod
    def zero(cls, out: ScalarFormat) -> "Quire":
        return cls(QuireConfig.for_output(out))

    @property
    def value(self) -> float:
        if self.mant == 0:
            return 0.0
        return float(self.sign * self.mant * 2.0 ** (self.exp - self.config.frac_bits))

    def exact(self):
        """Value as an exact ``fractions.Fraction``."""
        from fractions import Fraction

        return self.sign * self.mant * Fraction(2) ** (self.exp - self.config.frac_bits)


@dataclass
class QuireBatch:
    """Struct-of-arrays quire state for ``n`` independent accumulators."""

    config: QuireConfig
    sign: np.ndarray
    mant: np.ndarray
    exp: np.ndarray
    exception: np.ndarray

    @classmethod
    def zeros(cls, n: int, out: ScalarFormat) -> "QuireBatch":
        return cls(
            QuireConfig.for_output(out),
            np.ones(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=bool),
        )

    @classmethod
    def from_quire(cls, q: Quire) -> "QuireBatch":
        return cls(
            q.config,
            np.array([q.sign], dtype=np.int64),
            np.array([q.mant], dtype=np.int64),
            np.array([q.exp], dtype=np.int64),
            np.array([q.exception]),
        )

    def __len__(self):
        return len(self.mant)

    def quire(self, i: int) -> Quire:
        return Quire(
            self.config, int(self.sign[i]), int(self.mant[i]), int(self.exp[i]), bool(self.exception[i])
        )

    def values(self) -> np.ndarray:
        return np.where(
            self.mant == 0, 0.0, self.sign * np.ldexp(self.mant.astype(np.float64), self.exp - self.config.frac_bits)
        )


@dataclass(frozen=True)
class MacIssue:
    a: SimdWord24
    b: SimdWord24
    addend: EncodedScalar | None
    mode: MacMode

    def __post_init__(self):
        if self.a.mode is not self.mode or self.b.mode is not self.mode:
            raise ValueError("operand words must match the issue mode")
        if self.addend is not None and self.addend.format not in (ScalarFormat.FP8, ScalarFormat.BF16):
            raise ValueError("addend must be FP8 or BF16")


@dataclass(frozen=True)
class MacResult:
    value: EncodedScalar
    exception: bool
    quire: Quire | None = None


# -- datapath -----------------------------------------------------------------


def _fp_fields(codes: np.ndarray, fmt: ScalarFormat):
    """(sign, significand, unbiased exponent, non-finite) from raw codes."""
    lay = fmt.layout
    codes = codes.astype(np.int64)
    s = (codes >> (lay.exp_bits + lay.mant_bits)) & 1
    e = (codes >> lay.mant_bits) & lay.exp_mask
    m = codes & lay.mant_mask
    sig = np.where(e > 0, m | (1 << lay.mant_bits), m)
    exp = np.maximum(e, 1) - lay.bias
    if fmt is ScalarFormat.FP8:
        special = (e == lay.exp_mask) & (m == lay.mant_mask)
    elif fmt is ScalarFormat.BF16:
        special = e == lay.exp_mask
    else:
        special = np.zeros(codes.shape, dtype=bool)
    return s, sig, exp, special


def _bit_length(x: np.ndarray) -> np.ndarray:
    # exact for x < 2**53
    _, e = np.frexp(x.astype(np.float64))
    return np.where(x > 0, e, 0).astype(np.int64)


def _lane_terms(a_codes, b_codes, mode: MacMode):
    """Per-lane product terms (sign, significand, frac bits, exponent, valid, special)."""
    fmt = mode.lane_format
    if fmt is ScalarFormat.INT4:
        a = a_codes.astype(np.int64)
        b = b_codes.astype(np.int64)
        sa, sb = a >> 3, b >> 3
        ma = np.where(sa == 1, 16 - a, a)
        mb = np.where(sb == 1, 16 - b, b)
        p = rmmec_multiply(ma, mb)
        e = _bit_length(p) - 1
        valid = p != 0
        return sa ^ sb, p, e, e, valid, np.zeros(p.shape, dtype=bool)
    sa, siga, ea, xa = _fp_fields(a_codes, fmt)
    sb, sigb, eb, xb = _fp_fields(b_codes, fmt)
    nibbles = 2 if fmt is ScalarFormat.BF16 else 1
    p = _nibble_product(siga, sigb, nibbles)
    special = xa | xb
    valid = (p != 0) & ~special
    frac = np.full(p.shape, 2 * fmt.layout.mant_bits, dtype=np.int64)
    return sa ^ sb, p, frac, ea + eb, valid, special


_LOWEST_EXP = np.iinfo(np.int64).min // 4


def mac_step_batch(
    a_codes: np.ndarray,
    b_codes: np.ndarray,
    mode: MacMode,
    q: QuireBatch,
    addend_codes: np.ndarray | None = None,
    addend_format: ScalarFormat | None = None,
    trace: Callable[[str], None] | None = None,
) -> QuireBatch:
    """Advance every quire in ``q`` by one issue. ``a_codes``/``b_codes`` are (n, lanes)."""
    a_codes = np.asarray(a_codes, dtype=np.int64).reshape(len(q), mode.lane_count)
    b_codes = np.asarray(b_codes, dtype=np.int64).reshape(len(q), mode.lane_count)
    # stage 1: lane products
    terms = _prep(_lane_terms(a_codes, b_codes, mode))
    return _accumulate(terms, mode, q, addend_codes, addend_format, trace)


def _prep(terms):
    """Lane terms in the form the accumulate stages consume."""
    sgn, mag, frac, exp, valid, special = terms
    return (
        np.where(valid, mag, 0),
        np.where(sgn == 1, -1, 1),
        np.where(valid, exp - frac, 0),  # exponent of each term's LSB
        np.where(valid, exp, _LOWEST_EXP),
        special.any(axis=-1),
        valid,
    )


def _accumulate(terms, mode: MacMode, q: QuireBatch, addend_codes=None, addend_format=None, trace=None) -> QuireBatch:
    """Stages 2-5 for prepared lane terms (see ``_prep``)."""
    cfg = q.config
    F = cfg.frac_bits
    mag, sgn, lsb, top, special, valid = terms
    exception = q.exception | special

    if addend_codes is not None:
        fmt = addend_format or cfg.out_format
        if fmt not in (ScalarFormat.FP8, ScalarFormat.BF16):
            raise ValueError("addend must be FP8 or BF16")
        s, sig, e, x = _fp_fields(np.asarray(addend_codes, dtype=np.int64).reshape(len(q)), fmt)
        exception = exception | x
        av = (sig != 0) & ~x
        frac = np.full(len(q), fmt.layout.mant_bits)
        extra = _prep((s[:, None], sig[:, None], frac[:, None], e[:, None], av[:, None], np.zeros((len(q), 1), bool)))
        mag, sgn, lsb, top, valid = (
            np.concatenate([a, b], axis=1) for a, b in zip((mag, sgn, lsb, top, valid), extra[:4] + extra[5:])
        )

    # stage 2: maximum exponent over lanes and the quire
    q_valid = q.mant != 0
    m = np.maximum(top.max(axis=1), np.where(q_valid, q.exp, _LOWEST_EXP))
    any_valid = m > _LOWEST_EXP
    m = np.where(any_valid, m, 0)

    # stage 3: align onto F fractional bits below 2**m, truncating toward zero
    sh = lsb - (m - F)[:, None]
    aligned = (mag << np.minimum(np.maximum(sh, 0), 62)) >> np.minimum(np.maximum(-sh, 0), 63)
    q_aligned = q.mant >> np.minimum(m - q.exp, 63)  # quire exponent never exceeds m

    # stage 4: exact signed sum
    total = (aligned * sgn).sum(axis=1) + q.sign * q_aligned

    # stage 5: leading-zero normalisation and exponent range check
    absum = np.abs(total)
    shift = _bit_length(absum) - 1 - F
    mant = (absum >> np.minimum(np.maximum(shift, 0), 62)) << np.minimum(np.maximum(-shift, 0), 62)
    new_exp = m + shift
    nonzero = absum != 0
    exception = exception | (nonzero & (new_exp > cfg.exp_max))
    keep = nonzero & (new_exp >= cfg.exp_min)  # underflow flushes to zero
    out = QuireBatch(
        cfg,
        np.where(keep & (total < 0), -1, 1),
        np.where(keep, mant, 0),
        np.where(keep, new_exp, 0),
        exception,
    )
    if trace is not None:
        for i in range(len(q)):
            parts = [str(int(-v)) if ok else "-" for v, ok in zip(sh[i], valid[i])]
            parts.append(str(int(q.exp[i] - m[i])) if q_valid[i] else "-")
            trace(
                f"mode={mode.value} max_exp={int(m[i]) if any_valid[i] else '-'} shifts={','.join(parts)} "
                f"quire=({int(out.sign[i]):+d},{int(out.mant[i]):#x},{int(out.exp[i])}) exc={int(out.exception[i])}"
            )
    return out


def mac_step(issue: MacIssue, q: Quire, trace: Callable[[str], None] | None = None) -> Quire:
    """One issue through the datapath; returns the updated quire."""
    from .numerics import unpack

    if issue.addend is not None and issue.addend.format is not q.config.out_format:
        raise ValueError("addend width does not match the quire configuration")

    a = np.array([[c.bits for c in unpack(issue.a)]])
    b = np.array([[c.bits for c in unpack(issue.b)]])
    addend = addend_fmt = None
    if issue.addend is not None:
        addend = np.array([issue.addend.bits])
        addend_fmt = issue.addend.format
    out = mac_step_batch(a, b, issue.mode, QuireBatch.from_quire(q), addend, addend_fmt, trace)
    return out.quire(0)


def quire_read_batch(q: QuireBatch, out: ScalarFormat):
    """Truncating readout to FP8/BF16; returns (codes, exception)."""
    if out not in (ScalarFormat.FP8, ScalarFormat.BF16):
        raise ValueError("MAC output must be FP8 or BF16")
    lay = out.layout
    F = q.config.frac_bits
    t = np.maximum(q.exp, lay.emin)
    drop = F - lay.mant_bits + (t - q.exp)
    keep = q.mant >> np.clip(drop, 0, 62)
    keep = np.where(drop > 62, 0, keep)
    normal = keep >= (1 << lay.mant_bits)
    field_ = np.where(normal, t + lay.bias, 0)
    code = (field_ << lay.mant_bits) | (keep & lay.mant_mask)
    max_code = 0x7E if out is ScalarFormat.FP8 else 0x7F7F
    over = q.exception | (code > max_code)
    code = np.where(over, max_code, code)
    sign_bit = 1 << (lay.exp_bits + lay.mant_bits)
    code = np.where((q.sign < 0) & (code != 0), code | sign_bit, code)
    return code.astype(np.int64), over


def quire_read(q: Quire, out: ScalarFormat) -> MacResult:
    codes, exc = quire_read_batch(QuireBatch.from_quire(q), out)
    return MacResult(EncodedScalar(out, int(codes[0])), bool(exc[0]), q)


def _lane_codes(values, mode: MacMode) -> np.ndarray:
    return encode_array(np.asarray(values, dtype=np.float64), mode.lane_format).astype(np.int64)


def dot_product_codes(
    a_codes: np.ndarray,
    b_codes: np.ndarray,
    mode: MacMode,
    out: ScalarFormat,
    addend_codes: np.ndarray | None = None,
    trace: Callable[[str], None] | None = None,
) -> tuple[np.ndarray, np.ndarray, QuireBatch]:
    """Batched dot products over lane codes.

    ``a_codes``/``b_codes`` are ``(n, K)``; K is zero-padded to whole words.
    The addend (codes in ``out`` format) is injected on the first issue only.
    Returns ``(result codes, exception flags, final quires)``.
    """
    a_codes = np.atleast_2d(np.asarray(a_codes, dtype=np.int64))
    b_codes = np.atleast_2d(np.asarray(b_codes, dtype=np.int64))
    if a_codes.shape != b_codes.shape:
        raise ValueError(f"operand shapes differ: {a_codes.shape} vs {b_codes.shape}")
    n, k = a_codes.shape
    if k == 0:
        raise ValueError("empty dot product")
    lanes = mode.lane_count
    words = -(-k // lanes)
    pad = words * lanes - k
    if pad:
        a_codes = np.pad(a_codes, ((0, 0), (0, pad)))
        b_codes = np.pad(b_codes, ((0, 0), (0, pad)))
    # decode every word's lanes up front; the loop then runs stages 2-5 per issue
    terms = _prep([t.reshape(n, words, lanes) for t in _lane_terms(a_codes.reshape(-1, lanes), b_codes.reshape(-1, lanes), mode)])
    q = QuireBatch.zeros(n, out)
    for w in range(words):
        add = addend_codes if w == 0 else None
        q = _accumulate([t[:, w] for t in terms], mode, q, add, out if add is not None else None, trace)
    codes, exc = quire_read_batch(q, out)
    return codes, exc, q


def dot_product(
    a: Sequence[float],
    b: Sequence[float],
    mode: MacMode,
    out: ScalarFormat = ScalarFormat.BF16,
    addend: float = 0.0,
    trace: Callable[[str], None] | None = None,
) -> MacResult:
    """Encode real vectors into ``mode`` lanes and accumulate them on one quire."""
    if len(a) != len(b):
        raise ValueError("vectors differ in length")
    if len(a) == 0:
        raise ValueError("empty dot product")
    add = np.array([encode_bits(addend, out)]) if addend else None
    codes, exc, q = dot_product_codes(
        _lane_codes(a, mode)[None], _lane_codes(b, mode)[None], mode, out, add, trace
    )
    return MacResult(EncodedScalar(out, int(codes[0])), bool(exc[0]), q.quire(0))


def issue_words(a_codes: Sequence[int], b_codes: Sequence[int], mode: MacMode):
    """Split code vectors into ``MacIssue``-ready operand word pairs."""
    from .numerics import pack_codes

    lanes = mode.lane_count
    k = len(a_codes)
    pad = (-k) % lanes
    a = np.pad(np.asarray(a_codes, dtype=np.int64), (0, pad)).reshape(-1, lanes)
    b = np.pad(np.asarray(b_codes, dtype=np.int64), (0, pad)).reshape(-1, lanes)
    return [
        (SimdWord24(int(wa), mode), SimdWord24(int(wb), mode))
        for wa, wb in zip(pack_codes(a, mode), pack_codes(b, mode))
    ]


def mac_cycles(mode: MacMode, vector_len: int) -> int:
    """One issue per cycle plus the fill of the five-stage pipe."""
    if vector_len < 1:
        raise ValueError("vector_len must be >= 1")
    return -(-vector_len // mode.lane_count) + PIPELINE_DEPTH - 1
