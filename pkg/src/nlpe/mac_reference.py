"""Step-wise align/truncate reference for the MAC datapath.

Written against decoded real values rather than bit fields: every quantity
lives on one fixed dyadic grid (units of 2**-GRID) as a Python int, so
alignment is a floor division and nothing depends on the datapath's
significand/shift bookkeeping. Slow, exact, and used only as an oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numerics import MacMode, ScalarFormat, decode_bits, encode_bits

GRID = 320  # covers BF16 subnormal x subnormal products (2**-266)


def _on_grid(v: float) -> int:
    n, d = v.as_integer_ratio()
    # d is a power of two no larger than 2**GRID for every format used here
    return n * ((1 << GRID) // d)


def _floor_log2(g: int) -> int:
    return abs(g).bit_length() - 1 - GRID


@dataclass
class RefQuire:
    value: int = 0  # grid units
    exception: bool = False


@dataclass(frozen=True)
class RefConfig:
    width: int
    exp_bits: int

    @classmethod
    def for_output(cls, out: ScalarFormat) -> "RefConfig":
        return cls(8, 4) if out is ScalarFormat.FP8 else cls(16, 8)

    @property
    def frac(self) -> int:
        return self.width + 4


def _operand_exponent(v: float, fmt: ScalarFormat) -> int:
    # exponent as the hardware sees it: subnormals sit at emin
    return max(math.frexp(v)[1] - 1, fmt.layout.emin)


def ref_step(a_codes, b_codes, mode: MacMode, q: RefQuire, cfg: RefConfig,
             addend_code: int | None = None, addend_fmt: ScalarFormat | None = None) -> RefQuire:
    fmt = mode.lane_format
    terms: list[tuple[int, int]] = []  # (grid value, exponent)
    exc = q.exception
    for ca, cb in zip(a_codes, b_codes):
        va, vb = decode_bits(int(ca), fmt), decode_bits(int(cb), fmt)
        if not (math.isfinite(va) and math.isfinite(vb)):
            exc = True
            continue
        p = (_on_grid(va) * _on_grid(vb)) >> GRID
        if p == 0:
            continue
        if fmt.is_int:
            e = _floor_log2(p)
        else:
            e = _operand_exponent(va, fmt) + _operand_exponent(vb, fmt)
        terms.append((p, e))
    if addend_code is not None:
        vc = decode_bits(int(addend_code), addend_fmt)
        if not math.isfinite(vc):
            exc = True
        elif vc != 0:
            terms.append((_on_grid(vc), _operand_exponent(vc, addend_fmt)))
    if q.value:
        terms.append((q.value, _floor_log2(q.value)))
    if not terms:
        return RefQuire(0, exc)

    m = max(e for _, e in terms)
    unit_shift = m - cfg.frac + GRID
    assert unit_shift >= 0
    s = 0
    for g, _ in terms:
        t = abs(g) >> unit_shift
        s += -t if g < 0 else t
    v = s << unit_shift
    if v == 0:
        return RefQuire(0, exc)
    lead = _floor_log2(v)
    drop = lead - cfg.frac + GRID
    mag = (abs(v) >> drop) << drop
    v = -mag if v < 0 else mag
    bias = (1 << (cfg.exp_bits - 1)) - 1
    if lead > (1 << cfg.exp_bits) - 1 - bias:
        exc = True
    if lead < -bias:
        v = 0
    return RefQuire(v, exc)


def ref_read(q: RefQuire, out: ScalarFormat) -> tuple[int, bool]:
    """Truncate toward zero onto the output grid; saturate on overflow."""
    lay = out.layout
    maxf = out.max_finite
    if q.exception:
        return encode_bits(math.copysign(maxf, q.value or 1), out), True
    if q.value == 0:
        return 0, False
    e = max(_floor_log2(q.value), lay.emin)
    step = e - lay.mant_bits + GRID
    mag = (abs(q.value) >> step) << step
    if mag == 0:
        return 0, False
    val = math.ldexp(mag >> step, e - lay.mant_bits)
    if val > maxf:
        return encode_bits(math.copysign(maxf, q.value), out), True
    return encode_bits(math.copysign(val, q.value), out), False


def ref_dot_codes(a_codes, b_codes, mode: MacMode, out: ScalarFormat,
                  addend_code: int | None = None) -> tuple[int, bool, RefQuire]:
    cfg = RefConfig.for_output(out)
    lanes = mode.lane_count
    a = list(a_codes) + [0] * ((-len(a_codes)) % lanes)
    b = list(b_codes) + [0] * ((-len(b_codes)) % lanes)
    q = RefQuire()
    for w in range(0, len(a), lanes):
        add = addend_code if w == 0 else None
        q = ref_step(a[w : w + lanes], b[w : w + lanes], mode, q, cfg, add, out if add is not None else None)
    code, exc = ref_read(q, out)
    return code, exc, q


def ref_value(q: RefQuire) -> float:
    return math.ldexp(q.value, -GRID) if q.value else 0.0
