"""Benchmark and verification suites shared by the CLI, tests and demos.

Each suite returns plain data (dataclasses / lists of metric rows); the CLI
only formats and writes them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cordic import CordicConfig, NafKind, SELU_ALPHA, SELU_LAMBDA, naf_eval_array, softmax, to_precision
from .mac_reference import ref_dot_codes
from .numerics import MacMode, ScalarFormat, decode_array, encode_array
from .simd_mac import dot_product_codes
from .systolic import ArrayGeometry, cycle_model
from .transformer import ModelConfig, greedy_decode_batch, init_weights, model_size_report, ptq_model


class Provenance(Enum):
    MEASURED = "measured"
    MODELED = "modeled"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class Metric:
    name: str
    value: float | int | str
    unit: str
    provenance: Provenance = Provenance.MEASURED

    def to_record(self) -> dict:
        v = self.value
        if isinstance(v, (np.integer,)):
            v = int(v)
        elif isinstance(v, (np.floating,)):
            v = float(v)
        return {"name": self.name, "value": v, "unit": self.unit, "provenance": self.provenance.value}


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


# -- MAC verification ---------------------------------------------------------

INT4_CORNERS = (-8, -1, 0, 1, 7)


def _int4_codes(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.int64) & 0xF


def int4_oracle_mismatches(a_vals: np.ndarray, b_vals: np.ndarray, out: ScalarFormat = ScalarFormat.BF16) -> int:
    """Compare Int4x6 dot products against exact integer sums.

    The quire must hold the exact sum; where the sum is exactly representable
    in ``out`` the read-out value must equal it too.
    """
    a_vals = np.asarray(a_vals, dtype=np.int64)
    b_vals = np.asarray(b_vals, dtype=np.int64)
    codes, exc, q = dot_product_codes(_int4_codes(a_vals), _int4_codes(b_vals), MacMode.INT4X6, out)
    exact = [sum(int(x) * int(y) for x, y in zip(ra, rb)) for ra, rb in zip(a_vals.tolist(), b_vals.tolist())]
    qv = q.values()
    limit = 2 ** (out.layout.mant_bits + 1)
    read = decode_array(codes, out)
    bad = 0
    for i, s in enumerate(exact):
        if exc[i] or qv[i] != s or (abs(s) <= limit and read[i] != s):
            bad += 1
    return bad


def int4_corner_set() -> tuple[np.ndarray, np.ndarray]:
    """Every single-word lane assignment from the corner values, against
    each uniform corner word, itself, and its reversal."""
    words = np.array(list(itertools.product(INT4_CORNERS, repeat=6)), dtype=np.int64)
    a, b = [], []
    for c in INT4_CORNERS:
        a.append(words)
        b.append(np.full_like(words, c))
    a += [words, words]
    b += [words, words[:, ::-1]]
    return np.concatenate(a), np.concatenate(b)


def int4_random_set(trials: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random length-{6,12,24} vectors; grouped by length for batching."""
    lengths = rng.choice([6, 12, 24], size=trials)
    out = []
    for k in (6, 12, 24):
        n = int((lengths == k).sum())
        if n:
            out.append((rng.integers(-8, 8, size=(n, k)), rng.integers(-8, 8, size=(n, k))))
    return out


def _fp_operands(fmt: ScalarFormat, n: int, k: int, rng: np.random.Generator):
    # half uniform over every code (specials included), half moderate-range values
    u = rng.integers(0, 1 << fmt.bits, size=(n, k))
    scale = min(fmt.max_finite, 4.0) / 2
    m = encode_array(rng.normal(0, scale, size=(n, k)), fmt).astype(np.int64)
    pick = rng.random(size=(n, 1)) < 0.5
    return np.where(pick, u, m)


def fp_reference_mismatches(mode: MacMode, trials: int, rng: np.random.Generator) -> tuple[int, int]:
    """Bit-exact comparison of the datapath against the step-wise reference.

    Returns ``(mismatches, trials)``. Lengths are 1..24, output FP8 or BF16,
    with a random addend on half the trials.
    """
    fmt = mode.lane_format
    lengths = rng.integers(1, 25, size=trials)
    outs = rng.integers(0, 2, size=trials)
    bad = 0
    for k in np.unique(lengths):
        for o in (0, 1):
            idx = np.nonzero((lengths == k) & (outs == o))[0]
            if idx.size == 0:
                continue
            out = (ScalarFormat.FP8, ScalarFormat.BF16)[o]
            a = _fp_operands(fmt, idx.size, int(k), rng)
            b = _fp_operands(fmt, idx.size, int(k), rng)
            use_add = rng.random(idx.size) < 0.5
            add = np.where(use_add, encode_array(rng.normal(0, 2, idx.size), out), 0)
            codes, exc, _ = dot_product_codes(a, b, mode, out, add)
            al, bl = a.tolist(), b.tolist()
            for i in range(idx.size):
                rc, re, _ = ref_dot_codes(al[i], bl[i], mode, out, int(add[i]))
                bad += int(rc != codes[i] or re != exc[i])
    return bad, trials


def mac_verify(trials: int, modes, rng: np.random.Generator) -> tuple[list[Metric], list[Check]]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows, checks = [], []
    for mode in modes:
        if mode is MacMode.INT4X6:
            bad = 0
            for a, b in int4_random_set(trials, rng):
                bad += int4_oracle_mismatches(a, b)
            ca, cb = int4_corner_set()
            corner_bad = int4_oracle_mismatches(ca, cb)
            rows += [
                Metric(f"{mode.value}.trials", trials, "count"),
                Metric(f"{mode.value}.mismatches", bad, "count"),
                Metric(f"{mode.value}.corner_trials", len(ca), "count"),
                Metric(f"{mode.value}.corner_mismatches", corner_bad, "count"),
            ]
            checks.append(Check(f"{mode.value}.exact", bad == 0 and corner_bad == 0))
        else:
            bad, n = fp_reference_mismatches(mode, trials, rng)
            rows += [Metric(f"{mode.value}.trials", n, "count"), Metric(f"{mode.value}.mismatches", bad, "count")]
            checks.append(Check(f"{mode.value}.bit_exact", bad == 0))
    return rows, checks


# -- activation sweeps --------------------------------------------------------


def reference_activation(x: np.ndarray, kind: NafKind) -> np.ndarray:
    """Float64 closed forms, independent of the CORDIC path."""
    x = np.asarray(x, dtype=np.float64)
    if kind is NafKind.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind is NafKind.TANH:
        return np.tanh(x)
    if kind is NafKind.RELU:
        return np.maximum(x, 0.0)
    if kind is NafKind.GELU:
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))
    if kind is NafKind.SWISH:
        return x * 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind is NafKind.SELU:
        return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    raise ValueError(f"no scalar reference for {kind.value}")


NAF_LIMITS = {NafKind.SIGMOID: 2e-3, NafKind.TANH: 2e-3, NafKind.GELU: 5e-3, NafKind.SWISH: 5e-3, NafKind.RELU: 0.0}
SOFTMAX_SUM_TOL = 1e-3


@dataclass(frozen=True)
class NafError:
    kind: NafKind
    precision: ScalarFormat
    iterations: int
    max_abs: float  # at internal precision, inputs quantised to the I/O format
    mean_abs: float
    max_abs_io: float  # after rounding the output to the I/O format


def naf_error(kind: NafKind, precision: ScalarFormat, iterations: int, points: int = 4096,
              lo: float = -8.0, hi: float = 8.0) -> NafError:
    cfg = CordicConfig(iterations, precision=precision)
    x = to_precision(np.linspace(lo, hi, points), precision)
    y = naf_eval_array(x, kind, cfg)
    ref = reference_activation(x, kind)
    err = np.abs(y - ref)
    io = np.abs(to_precision(y, precision) - ref)
    return NafError(kind, precision, iterations, float(err.max()), float(err.mean()), float(io.max()))


def softmax_sum_error(vectors: int, rng: np.random.Generator, iterations: int = 16,
                      precision: ScalarFormat = ScalarFormat.BF16) -> float:
    """Worst |sum - 1| over random rows of length 2..64 (internal precision)."""
    cfg = CordicConfig(iterations, precision=precision)
    lengths = rng.integers(2, 65, size=vectors)
    worst = 0.0
    for k in np.unique(lengths):
        n = int((lengths == k).sum())
        x = to_precision(rng.normal(0, 3, size=(n, int(k))), precision)
        s = softmax(x, cfg).sum(axis=-1)
        worst = max(worst, float(np.abs(s - 1.0).max()))
    return worst


def naf_sweep(kinds, precision: ScalarFormat, iterations, rng: np.random.Generator,
              points: int = 4096, vectors: int = 10_000) -> tuple[list[Metric], list[Check]]:
    rows, checks = [], []
    for kind in kinds:
        for it in iterations:
            tag = f"{kind.value}.{precision.value}.it{it}"
            if kind is NafKind.SOFTMAX:
                err = softmax_sum_error(vectors, rng, it, precision)
                rows.append(Metric(f"{tag}.max_row_sum_err", err, "abs"))
                if it == 16 and precision is ScalarFormat.BF16:
                    checks.append(Check(f"{tag}.row_sum", err <= SOFTMAX_SUM_TOL, f"{err:.3g}"))
                continue
            e = naf_error(kind, precision, it, points)
            rows += [
                Metric(f"{tag}.max_abs_err", e.max_abs, "abs"),
                Metric(f"{tag}.mean_abs_err", e.mean_abs, "abs"),
                Metric(f"{tag}.max_abs_err_io", e.max_abs_io, "abs"),
            ]
            if kind in NAF_LIMITS and it == 16 and precision is ScalarFormat.BF16:
                checks.append(Check(f"{tag}.limit", e.max_abs <= NAF_LIMITS[kind], f"{e.max_abs:.3g}"))
    return rows, checks


# -- performance ----------------------------------------------------------------

SPEEDUP_BANDS = {MacMode.INT4X6: (5.4, 6.6), MacMode.FP4X6: (5.4, 6.6), MacMode.FP8X3: (2.7, 3.3)}


def gemm_speedups(M: int, K: int, N: int, g: ArrayGeometry) -> dict[MacMode, tuple[int, float]]:
    """Cycles per mode and the BF16/mode cycle ratio."""
    base = cycle_model(M, K, N, g, MacMode.BF16X1)
    return {m: (cycle_model(M, K, N, g, m), base / cycle_model(M, K, N, g, m)) for m in MacMode}


# -- size -----------------------------------------------------------------------

TARGET_FP4_BYTES = 0.56e9
TARGET_FP4_RATIO = 4.1
FP4_RATIO_BAND = (3.9, 4.3)
FP4_BYTES_TOL = 0.10

SIZE_FORMATS = (ScalarFormat.REF, ScalarFormat.BF16, ScalarFormat.INT8, ScalarFormat.FP8, ScalarFormat.FP4,
                ScalarFormat.INT4)


def size_table(params: int, formats, block_size: int = 64, config: ModelConfig | None = None):
    cfg = config or ModelConfig()
    rows, checks = [], []
    for fmt in formats:
        r = model_size_report(cfg, fmt, block_size, params)
        name = "fp32" if fmt is ScalarFormat.REF else fmt.value
        rows += [
            Metric(f"{name}.bytes", r.bytes, "bytes", Provenance.MODELED),
            Metric(f"{name}.ratio_vs_fp32", r.ratio, "ratio", Provenance.MODELED),
            Metric(f"{name}.retained_bf16_fraction", r.retained_fraction, "fraction", Provenance.CALIBRATED),
            Metric(f"{name}.toy_bytes", r.toy_bytes, "bytes", Provenance.MEASURED),
            Metric(f"{name}.toy_ratio_vs_fp32", r.toy_ratio, "ratio", Provenance.MEASURED),
        ]
        if fmt is ScalarFormat.FP4:
            lo, hi = FP4_RATIO_BAND
            checks.append(Check("fp4.ratio_band", lo <= r.ratio <= hi, f"{r.ratio:.3f}"))
            checks.append(Check("fp4.footprint", abs(r.bytes - TARGET_FP4_BYTES) <= FP4_BYTES_TOL * TARGET_FP4_BYTES,
                                f"{r.bytes / 1e9:.4f} GB"))
        if fmt is ScalarFormat.BF16:
            checks.append(Check("bf16.ratio_exact", r.ratio == 2.0))
    return rows, checks


# -- translation ----------------------------------------------------------------


@dataclass(frozen=True)
class DecodePair:
    src: list[int]
    ref: list[int]
    test: list[int]


def paired_decodes(sources, precision: ScalarFormat, config: ModelConfig, max_len: int = 8) -> list[DecodePair]:
    sources = [list(map(int, s)) for s in sources]
    w = init_weights(config)
    refs = greedy_decode_batch(sources, w, max_len)
    if precision is ScalarFormat.REF:
        tests = [list(r) for r in refs]
    else:
        tests = greedy_decode_batch(sources, ptq_model(w, precision), max_len, precision)
    return [DecodePair(s, r, t) for s, r, t in zip(sources, refs, tests)]


def agreement(pairs: list[DecodePair]) -> tuple[float, float]:
    """(exact-sequence agreement, position-wise token agreement)."""
    if not pairs:
        return 1.0, 1.0
    seq = sum(p.ref == p.test for p in pairs) / len(pairs)
    hit = tot = 0
    for p in pairs:
        n = max(len(p.ref), len(p.test))
        hit += sum(a == b for a, b in zip(p.ref, p.test))
        tot += n
    return seq, hit / tot if tot else 1.0


def random_sources(n: int, rng: np.random.Generator, vocab: int, lo: int = 3, hi: int = 8) -> list[list[int]]:
    return [rng.integers(4, vocab, size=int(rng.integers(lo, hi + 1))).tolist() for _ in range(n)]
