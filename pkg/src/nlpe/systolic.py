"""Output-stationary systolic matrix engine.

Each PE owns one quire and one output element. Operand words enter from the
left (rows of A) and top (columns of B) through one edge register, with a
one-cycle skew per row/column, so PE (i, j) sees word k at local cycle
``k + i + j + 1``. A tile of ``rows x cols`` outputs therefore takes
``k_words + rows + cols - 1`` cycles;
tiles run back to back and the MAC pipe adds a one-off fill of 4 cycles.

Values never depend on geometry: every output is the same sequence of
``mac_step`` issues a standalone dot product would see.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    MacMode,
    QuantParams,
    ScalarFormat,
    Tensor,
    decode_array,
    quantize_tensor,
)
from .simd_mac import PIPELINE_DEPTH, QuireBatch, dot_product_codes, mac_step_batch, quire_read_batch


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one row and one column")

    @property
    def pes(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class Tile:
    row0: int
    col0: int
    rows: int  # rows of C actually covered (edge tiles may be short)
    cols: int
    k_words: int
    cycles: int


@dataclass
class TilePlan:
    M: int
    K: int
    N: int
    geometry: ArrayGeometry
    mode: MacMode
    tiles: list[Tile] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return cycle_model(self.M, self.K, self.N, self.geometry, self.mode)

    def covers_exactly_once(self) -> bool:
        hits = np.zeros((self.M, self.N), dtype=np.int64)
        for t in self.tiles:
            hits[t.row0 : t.row0 + t.rows, t.col0 : t.col0 + t.cols] += 1
        return bool(np.all(hits == 1))


@dataclass
class MmeStats:
    M: int
    K: int
    N: int
    rows: int
    cols: int
    mode: MacMode
    cycles: int
    mac_ops: int

    @property
    def utilization(self) -> float:
        return self.mac_ops / (self.cycles * self.rows * self.cols)

    def to_record(self) -> dict:
        return {
            "M": self.M,
            "K": self.K,
            "N": self.N,
            "rows": self.rows,
            "cols": self.cols,
            "mode": self.mode.value,
            "cycles": self.cycles,
            "mac_ops": self.mac_ops,
            "utilization": self.utilization,
        }


def _check_dims(*dims):
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")


def plan_tiles(M: int, K: int, N: int, g: ArrayGeometry, mode: MacMode) -> TilePlan:
    _check_dims(M, K, N)
    kw = -(-K // mode.lane_count)
    per_tile = kw + g.rows + g.cols - 1
    plan = TilePlan(M, K, N, g, mode)
    for r0 in range(0, M, g.rows):
        for c0 in range(0, N, g.cols):
            plan.tiles.append(Tile(r0, c0, min(g.rows, M - r0), min(g.cols, N - c0), kw, per_tile))
    return plan


def cycle_model(M: int, K: int, N: int, g: ArrayGeometry, mode: MacMode = MacMode.BF16X1) -> int:
    _check_dims(M, K, N)
    kw = -(-K // mode.lane_count)
    tiles = -(-M // g.rows) * -(-N // g.cols)
    return tiles * (kw + g.rows + g.cols - 1) + PIPELINE_DEPTH - 1


def mac_ops(M: int, K: int, N: int, mode: MacMode) -> int:
    """PE issue slots used: one per output per operand word."""
    return M * N * -(-K // mode.lane_count)


def matmul_codes(a_codes, b_codes, mode: MacMode, out: ScalarFormat, g: ArrayGeometry):
    """Code-domain GEMM. ``a_codes`` is (M, K), ``b_codes`` is (K, N).

    Returns ``(c_codes, exception flags, MmeStats)``.
    """
    a = np.asarray(a_codes, dtype=np.int64)
    b = np.asarray(b_codes, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    M, K = a.shape
    N = b.shape[1]
    _check_dims(M, K, N)
    lhs = np.repeat(a, N, axis=0)
    rhs = np.tile(b.T, (M, 1))
    codes, exc, _ = dot_product_codes(lhs, rhs, mode, out)
    stats = MmeStats(M, K, N, g.rows, g.cols, mode, cycle_model(M, K, N, g, mode), mac_ops(M, K, N, mode))
    return codes.reshape(M, N), exc.reshape(M, N), stats


def matmul(A: Tensor, B: Tensor, mode: MacMode, out: ScalarFormat, g: ArrayGeometry):
    """GEMM of two lane-format tensors on the array.

    The engine multiplies codes; block scales are not applied here (see
    :func:`block_scaled_matmul`). The result carries unit scale.
    """
    fmt = mode.lane_format
    if A.format is not fmt or B.format is not fmt:
        raise ValueError(f"{mode.value} needs {fmt.value} operands")
    if len(A.dims) != 2 or len(B.dims) != 2 or A.dims[1] != B.dims[0]:
        raise ValueError(f"cannot multiply {A.dims} by {B.dims}")
    codes, _, stats = matmul_codes(A.data, B.data, mode, out, g)
    return Tensor(codes.shape, out, codes, QuantParams(None)), stats


def simulate_wavefront(a_codes, b_codes, mode: MacMode, out: ScalarFormat, g: ArrayGeometry):
    """Cycle-by-cycle run of the skewed output-stationary schedule.

    Returns ``(c_codes, exception flags, cycles, mac_ops)`` where ``cycles``
    and ``mac_ops`` are counted from the simulated PE activity.
    """
    a = np.asarray(a_codes, dtype=np.int64)
    b = np.asarray(b_codes, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    M, K = a.shape
    N = b.shape[1]
    lanes = mode.lane_count
    kw = -(-K // lanes)
    pad = kw * lanes - K
    a = np.pad(a, ((0, 0), (0, pad))).reshape(M, kw, lanes)
    b = np.pad(b, ((0, pad), (0, 0))).T.reshape(N, kw, lanes)
    c = np.zeros((M, N), dtype=np.int64)
    exc = np.zeros((M, N), dtype=bool)
    cycles = 0
    ops = 0
    ii, jj = np.meshgrid(np.arange(g.rows), np.arange(g.cols), indexing="ij")
    ii, jj = ii.reshape(-1), jj.reshape(-1)
    for r0 in range(0, M, g.rows):
        for c0 in range(0, N, g.cols):
            present = (r0 + ii < M) & (c0 + jj < N)
            q = QuireBatch.zeros(g.pes, out)
            t = 0
            while True:
                k = t - 1 - ii - jj  # one cycle through the edge registers
                if np.all(k >= kw):
                    break
                active = present & (k >= 0) & (k < kw)
                idx = np.nonzero(active)[0]
                if idx.size:
                    sub = QuireBatch(q.config, q.sign[idx], q.mant[idx], q.exp[idx], q.exception[idx])
                    kk = k[idx]
                    sub = mac_step_batch(a[r0 + ii[idx], kk], b[c0 + jj[idx], kk], mode, sub)
                    q.sign[idx], q.mant[idx], q.exp[idx], q.exception[idx] = sub.sign, sub.mant, sub.exp, sub.exception
                    ops += idx.size
                t += 1
            cycles += t
            codes, flags = quire_read_batch(q, out)
            sel = np.nonzero(present)[0]
            c[r0 + ii[sel], c0 + jj[sel]] = codes[sel]
            exc[r0 + ii[sel], c0 + jj[sel]] = flags[sel]
    return c, exc, cycles + PIPELINE_DEPTH - 1, ops


def multihead_schedule(heads: int, seq: int, d_head: int, g: ArrayGeometry, mode: MacMode = MacMode.BF16X1):
    """Per-head QK^T then PV on one array, serialised. Returns ``(plans, total cycles)``."""
    if heads < 0:
        raise ValueError("heads must be >= 0")
    plans: list[TilePlan] = []
    if heads == 0:
        return plans, 0
    _check_dims(seq, d_head)
    for _ in range(heads):
        plans.append(plan_tiles(seq, d_head, seq, g, mode))
        plans.append(plan_tiles(seq, seq, d_head, g, mode))
    return plans, sum(p.cycles for p in plans)


# -- block-scaled GEMM --------------------------------------------------------


@dataclass
class MmeCounter:
    """Running totals for a sequence of engine invocations."""

    cycles: int = 0
    mac_ops: int = 0
    invocations: int = 0

    def add(self, stats: MmeStats):
        self.cycles += stats.cycles
        self.mac_ops += stats.mac_ops
        self.invocations += 1


def _row_quantize(x: np.ndarray, fmt: ScalarFormat, block: int):
    t = quantize_tensor(Tensor.ref(x), fmt, block)
    M, K = x.shape
    nb = K // block if t.params.block_size else 1
    scales = t.params.scales.reshape(M, nb) if t.params.block_size else np.ones((M, 1))
    return t.data.astype(np.int64), scales


def block_scaled_matmul(
    x: np.ndarray,
    w: Tensor,
    mode: MacMode,
    g: ArrayGeometry,
    out: ScalarFormat = ScalarFormat.BF16,
    counter: MmeCounter | None = None,
) -> np.ndarray:
    """``x @ w.T`` for real activations ``x`` (M, K) and a quantised weight ``w`` (N, K).

    Activations are quantised per row with the weight's block size so K-blocks
    line up; each K-block runs through the engine on codes and the partial
    results are rescaled by ``scale_x * scale_w`` and summed.
    """
    return block_scaled_matmul_many([(x, w)], mode, g, out, counter)[0]


def _operands(x: np.ndarray, w: Tensor, mode: MacMode):
    x = np.asarray(x, dtype=np.float64)
    fmt = mode.lane_format
    if w.format is not fmt:
        raise ValueError(f"{mode.value} needs a {fmt.value} weight, got {w.format.value}")
    if x.ndim != 2 or len(w.dims) != 2 or x.shape[1] != w.dims[1]:
        raise ValueError(f"cannot multiply {x.shape} by {w.dims}^T")
    M, K = x.shape
    N = w.dims[0]
    bs = w.params.block_size
    if bs is None:
        bs, nb = K, 1
    elif K % bs:
        raise ValueError(f"block size {bs} does not divide K={K}")
    else:
        nb = K // bs
    xc, xs = _row_quantize(x, fmt, bs if w.params.block_size else 1 << 62)
    wc = w.data.astype(np.int64)
    ws = w.params.scales.reshape(N, nb) if w.params.block_size else np.ones((N, 1))
    lhs = np.broadcast_to(xc.reshape(M, 1, nb, bs), (M, N, nb, bs)).reshape(-1, bs)
    rhs = np.broadcast_to(wc.reshape(1, N, nb, bs), (M, N, nb, bs)).reshape(-1, bs)
    return lhs, rhs, xs, ws, (M, N, nb, bs)


def block_scaled_matmul_many(pairs, mode: MacMode, g: ArrayGeometry, out: ScalarFormat = ScalarFormat.BF16,
                             counter: MmeCounter | None = None) -> list[np.ndarray]:
    """Several independent :func:`block_scaled_matmul` calls in one engine pass.

    Each pair is still accounted as its own sequence of invocations; batching
    only amortises emulation overhead. Pairs must share a block length.
    """
    ops = [_operands(x, w, mode) for x, w in pairs]
    if not ops:
        return []
    if len({o[4][3] for o in ops}) != 1:
        raise ValueError("batched pairs must share a block length")
    codes, _, _ = dot_product_codes(np.concatenate([o[0] for o in ops]), np.concatenate([o[1] for o in ops]), mode, out)
    vals = decode_array(codes, out)
    results = []
    at = 0
    for lhs, _, xs, ws, (M, N, nb, bs) in ops:
        partial = vals[at : at + len(lhs)].reshape(M, N, nb)
        at += len(lhs)
        results.append(np.einsum("mnb,mb,nb->mn", partial, xs, ws))
        if counter is not None:
            for _ in range(nb):
                counter.add(MmeStats(M, bs, N, g.rows, g.cols, mode, cycle_model(M, bs, N, g, mode), mac_ops(M, bs, N, mode)))
    return results
