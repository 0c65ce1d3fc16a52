"""CORDIC activation unit: exponential, division and the functions built on them.

Internal arithmetic is fixed point with 24 fractional bits. ``exp`` uses
hyperbolic rotation after range reduction ``x = k ln2 + r`` and a final
residual-angle correction; division uses linear vectoring after prescaling
both mantissas, finished with a half-step toward the residual's sign.
Everything else is a composition of those two primitives, so a single shared
CORDIC core covers sigmoid, tanh, softmax, GeLU, swish and SELU.

Values are evaluated on numpy arrays; the scalar helpers wrap a 1-element
array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import ScalarFormat, decode_array, encode_array

FRAC_BITS = 24
ONE = 1 << FRAC_BITS
EXP_LIMIT = 89.0
MAX_ITERATIONS = 20  # beyond this the 24-bit datapath, not the iteration count, limits accuracy
OVERHEAD_CYCLES = 4

SELU_ALPHA = 1.6732632
SELU_LAMBDA = 1.0507010
_GELU_C = math.sqrt(2.0 / math.pi)

# ln2 held with 40 fractional bits for the range-reduction product
_LN2_Q40 = round(math.log(2.0) * (1 << 40))


class NafKind(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"
    GELU = "gelu"
    SWISH = "swish"
    SELU = "selu"

    @property
    def is_vector(self) -> bool:
        return self is NafKind.SOFTMAX

    @classmethod
    def parse(cls, name: str) -> "NafKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


@dataclass(frozen=True)
class CordicConfig:
    iterations: int = 16
    repeated_indices: tuple[int, ...] = (4, 13)
    precision: ScalarFormat = ScalarFormat.BF16

    def __post_init__(self):
        if not 8 <= self.iterations <= MAX_ITERATIONS:
            raise ValueError(f"iterations must lie in [8, {MAX_ITERATIONS}]")
        if self.precision not in (ScalarFormat.FP8, ScalarFormat.BF16):
            raise ValueError("activation I/O is FP8 or BF16")

    @property
    def lanes_per_cycle(self) -> int:
        return 2 if self.precision is ScalarFormat.FP8 else 1

    @property
    def latency(self) -> int:
        return self.iterations + OVERHEAD_CYCLES

    def hyperbolic_schedule(self) -> list[int]:
        """Shift index per step, with repeats, truncated to ``iterations`` steps."""
        seq: list[int] = []
        i = 1
        while len(seq) < self.iterations:
            seq.append(i)
            if i in self.repeated_indices and len(seq) < self.iterations:
                seq.append(i)
            i += 1
        return seq


DEFAULT_CONFIG = CordicConfig()


def _hyperbolic_tables(cfg: CordicConfig):
    sched = cfg.hyperbolic_schedule()
    atanh = [round(math.atanh(2.0**-i) * ONE) for i in sched]
    gain = math.prod(math.sqrt(1.0 - 4.0**-i) for i in sched)
    return sched, atanh, round(ONE / gain)


_TABLE_CACHE: dict[CordicConfig, tuple] = {}


def _tables(cfg: CordicConfig):
    if cfg not in _TABLE_CACHE:
        _TABLE_CACHE[cfg] = _hyperbolic_tables(cfg)
    return _TABLE_CACHE[cfg]


def _exp_core(r_fixed: np.ndarray, cfg: CordicConfig) -> np.ndarray:
    """e**r for |r| <= ln2/2, Q24 in and out."""
    sched, atanh, x0 = _tables(cfg)
    x = np.full(r_fixed.shape, x0, dtype=np.int64)
    y = np.zeros(r_fixed.shape, dtype=np.int64)
    z = r_fixed.astype(np.int64)
    for i, a in zip(sched, atanh):
        d = np.where(z >= 0, 1, -1)
        x, y = x + d * (y >> i), y + d * (x >> i)
        z = z - d * a
    w = x + y
    # fold the residual angle back in: e**(r) = (x + y) * e**z ~ (x + y)(1 + z)
    return w + ((w * z) >> FRAC_BITS)


def cordic_exp_array(x, cfg: CordicConfig = DEFAULT_CONFIG):
    """Vectorised e**x. Returns ``(values, overflow flags)``."""
    x = np.asarray(x, dtype=np.float64)
    over = x > EXP_LIMIT
    under = x < -EXP_LIMIT
    xc = np.where(over | under | ~np.isfinite(x), 0.0, x)
    xq = np.rint(np.ldexp(xc, FRAC_BITS)).astype(np.int64)
    k = np.rint(xc / math.log(2.0)).astype(np.int64)
    r = xq - ((k * _LN2_Q40) >> 16)
    res = np.ldexp(_exp_core(r, cfg).astype(np.float64), (k - FRAC_BITS).astype(np.int32))
    res = np.where(xc == 0.0, 1.0, res)  # zero operand bypasses the core
    res = np.where(under, 0.0, res)
    res = np.where(over, ScalarFormat.BF16.max_finite, res)
    res = np.where(np.isnan(x), np.nan, res)
    return res, over


def cordic_exp(x: float, cfg: CordicConfig = DEFAULT_CONFIG) -> float:
    v, _ = cordic_exp_array(np.array([x]), cfg)
    return float(v[0])


def cordic_exp_flagged(x: float, cfg: CordicConfig = DEFAULT_CONFIG) -> tuple[float, bool]:
    v, f = cordic_exp_array(np.array([x]), cfg)
    return float(v[0]), bool(f[0])


def cordic_div_array(num, den, cfg: CordicConfig = DEFAULT_CONFIG):
    """Vectorised num/den by linear vectoring. Returns ``(values, div-by-zero flags)``."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    num, den = np.broadcast_arrays(num, den)
    zero_den = den == 0
    zero_num = num == 0
    safe_den = np.where(zero_den, 1.0, den)
    safe_num = np.where(zero_num, 1.0, num)
    mn, en = np.frexp(np.abs(safe_num))  # mantissa in [0.5, 1)
    md, ed = np.frexp(np.abs(safe_den))
    # prescale so the mantissa ratio lies in [1, 2): integer quotient bit is 1
    low = mn < md
    mn = np.where(low, mn * 2, mn)
    en = np.where(low, en - 1, en)
    xf = np.rint(np.ldexp(md, FRAC_BITS)).astype(np.int64)
    y = np.rint(np.ldexp(mn, FRAC_BITS)).astype(np.int64) - xf
    z = np.full(y.shape, ONE, dtype=np.int64)
    for i in range(1, cfg.iterations + 1):
        live = y != 0
        d = np.where(y > 0, 1, -1)
        y = np.where(live, y - d * ((xf + (1 << (i - 1))) >> i), y)
        z = np.where(live, z + d * (ONE >> i), z)
    # the residual's sign says which half of the last interval holds the quotient
    z = z + np.sign(y) * (ONE >> (cfg.iterations + 1))
    sign = np.sign(num) * np.sign(safe_den)
    q = sign * np.ldexp(z.astype(np.float64), (en - ed - FRAC_BITS).astype(np.int32))
    q = np.where(zero_num & ~zero_den, 0.0, q)
    sat = np.copysign(ScalarFormat.BF16.max_finite, np.where(zero_num, 1.0, num))
    q = np.where(zero_den, sat, q)
    return q, zero_den


def cordic_div(num: float, den: float, cfg: CordicConfig = DEFAULT_CONFIG) -> float:
    q, _ = cordic_div_array(np.array([num]), np.array([den]), cfg)
    return float(q[0])


def cordic_div_flagged(num: float, den: float, cfg: CordicConfig = DEFAULT_CONFIG) -> tuple[float, bool]:
    q, f = cordic_div_array(np.array([num]), np.array([den]), cfg)
    return float(q[0]), bool(f[0])


# -- activation functions -----------------------------------------------------


def _sigmoid(x, cfg):
    e, _ = cordic_exp_array(-x, cfg)
    s, _ = cordic_div_array(np.ones_like(e), 1.0 + e, cfg)
    return s


def _tanh(x, cfg):
    # odd by construction: evaluate on |x| and restore the sign
    a = np.abs(x)
    t = 2.0 * _sigmoid(2.0 * a, cfg) - 1.0
    return np.copysign(t, x) * (x != 0)


def naf_eval_array(x, kind: NafKind, cfg: CordicConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Element-wise activation at internal precision."""
    if kind.is_vector:
        raise ValueError("softmax is vector-valued; use softmax()")
    x = np.asarray(x, dtype=np.float64)
    if kind is NafKind.SIGMOID:
        return _sigmoid(x, cfg)
    if kind is NafKind.TANH:
        return _tanh(x, cfg)
    if kind is NafKind.RELU:
        return np.maximum(x, 0.0)
    if kind is NafKind.GELU:
        return 0.5 * x * (1.0 + _tanh(_GELU_C * (x + 0.044715 * x**3), cfg))
    if kind is NafKind.SWISH:
        return x * _sigmoid(x, cfg)
    if kind is NafKind.SELU:
        e, _ = cordic_exp_array(np.minimum(x, 0.0), cfg)
        return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * (e - 1.0))
    raise ValueError(kind)


def naf_eval(x: float, kind: NafKind, cfg: CordicConfig = DEFAULT_CONFIG) -> float:
    return float(naf_eval_array(np.array([x]), kind, cfg)[0])


def softmax(xs, cfg: CordicConfig = DEFAULT_CONFIG, axis: int = -1, mask=None) -> np.ndarray:
    """Max-subtracted softmax with CORDIC exp and divide.

    ``mask`` (broadcastable, True = keep) removes positions; masked outputs are 0.
    """
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    e, _ = cordic_exp_array(np.where(np.isfinite(shifted), shifted, -np.inf), cfg)
    e = np.where(np.isneginf(shifted), 0.0, e)
    total = e.sum(axis=axis, keepdims=True)
    out, _ = cordic_div_array(e, np.broadcast_to(total, e.shape), cfg)
    return out


def to_precision(values, precision: ScalarFormat) -> np.ndarray:
    """Round through the I/O format (encode then decode)."""
    return decode_array(encode_array(values, precision), precision)


def naf_vector_cycles(n_lanes: int, precision: ScalarFormat, cfg: CordicConfig | None = None) -> int:
    if n_lanes < 1:
        raise ValueError("n_lanes must be >= 1")
    cfg = cfg or CordicConfig(precision=precision)
    lanes = 2 if precision is ScalarFormat.FP8 else 1
    return -(-n_lanes // lanes) * (cfg.iterations + OVERHEAD_CYCLES)


# -- vector array -------------------------------------------------------------


@dataclass(frozen=True)
class NafBatch:
    inputs: np.ndarray  # codes in ``precision``
    kind: NafKind
    precision: ScalarFormat = ScalarFormat.BF16

    def __post_init__(self):
        if self.precision not in (ScalarFormat.FP8, ScalarFormat.BF16):
            raise ValueError("activation I/O is FP8 or BF16")
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.int64).reshape(-1))

    @property
    def lanes_per_cycle(self) -> int:
        return 2 if self.precision is ScalarFormat.FP8 else 1

    @classmethod
    def from_values(cls, values, kind: NafKind, precision: ScalarFormat = ScalarFormat.BF16) -> "NafBatch":
        return cls(encode_array(values, precision), kind, precision)


@dataclass
class VectorArray:
    """MIMD array of activation units sharing one CORDIC configuration."""

    iterations: int = 16
    ops: int = field(default=0, init=False)
    cycles: int = field(default=0, init=False)

    def config(self, precision: ScalarFormat) -> CordicConfig:
        return CordicConfig(self.iterations, precision=precision)

    def run(self, batch: NafBatch) -> np.ndarray:
        """Evaluate a batch; returns output codes in the batch precision."""
        cfg = self.config(batch.precision)
        x = decode_array(batch.inputs, batch.precision)
        if batch.kind.is_vector:
            y = softmax(x, cfg)
        else:
            y = naf_eval_array(x, batch.kind, cfg)
        n = len(batch.inputs)
        self.ops += n
        self.cycles += naf_vector_cycles(n, batch.precision, cfg)
        return encode_array(y, batch.precision)
