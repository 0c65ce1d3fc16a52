"""Acceptance criteria: one PASS/FAIL line per criterion, at the stated tolerance.

Run alone with ``pytest -s tests/test_acceptance.py``; the lines are also
collected into an "acceptance criteria" section at the end of any run.
"""

import json
import math
import time

import numpy as np

from nlpe.bench import fp_reference_mismatches, int4_corner_set, int4_oracle_mismatches, int4_random_set, naf_error, \
    softmax_sum_error
from nlpe.cli import main
from nlpe.cordic import NafKind
from nlpe.numerics import MacMode, ScalarFormat, decode_array, decode_bits, encode_array, encode_bits
from nlpe.simd_mac import dot_product
from nlpe.systolic import ArrayGeometry, cycle_model, matmul_codes

from conftest import CHAIN


def test_int4_mac_exactness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    groups = int4_random_set(100_000, rng)
    bad = sum(int4_oracle_mismatches(a, b) for a, b in groups)
    ca, cb = int4_corner_set()
    bad_corner = int4_oracle_mismatches(ca, cb)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and bad_corner == 0 and elapsed < 60
    acceptance("Int4 MAC exactness", ok,
               f"{bad} mismatches / 100000 random, {bad_corner} / {len(ca)} corner, {elapsed:.1f} s (limit 60 s)")
    assert ok


def test_fp_mac_bit_exactness(acceptance):
    rng = np.random.default_rng(2025)
    results = {m: fp_reference_mismatches(m, 100_000, rng) for m in (MacMode.FP4X6, MacMode.FP8X3, MacMode.BF16X1)}
    ok = all(bad == 0 and n == 100_000 for bad, n in results.values())
    acceptance("FP MAC bit-exactness", ok, ", ".join(f"{m.value} {b}/{n}" for m, (b, n) in results.items()))
    assert ok


def _round_trip_failures(fmt: ScalarFormat) -> int:
    codes = np.arange(1 << fmt.bits)
    vals = decode_array(codes, fmt)
    back = encode_array(vals, fmt)
    fails = 0
    for c, v, b in zip(codes.tolist(), vals.tolist(), back.tolist()):
        scalar = encode_bits(decode_bits(c, fmt), fmt)
        if math.isnan(v):
            # canonical-NaN equality: any NaN pattern must come back as a NaN
            fails += not (math.isnan(decode_bits(b, fmt)) and math.isnan(decode_bits(scalar, fmt)))
        else:
            fails += not (b == c and scalar == c)
    return fails


def test_format_round_trip(acceptance):
    counts = {f: _round_trip_failures(f) for f in (ScalarFormat.FP4, ScalarFormat.FP8, ScalarFormat.BF16)}
    ok = all(v == 0 for v in counts.values())
    acceptance("Format round-trip", ok, ", ".join(f"{f.value} {v}/{1 << f.bits}" for f, v in counts.items()))
    assert ok


def test_cordic_accuracy(acceptance):
    limits = {NafKind.SIGMOID: 2e-3, NafKind.TANH: 2e-3, NafKind.GELU: 5e-3, NafKind.SWISH: 5e-3}
    errs = {k: naf_error(k, ScalarFormat.BF16, 16, 4096).max_abs for k in limits}
    sm = softmax_sum_error(10_000, np.random.default_rng(2026), 16, ScalarFormat.BF16)
    ok = all(errs[k] <= lim for k, lim in limits.items()) and sm <= 1e-3
    detail = ", ".join(f"{k.value} {errs[k]:.2e} (<= {lim:g})" for k, lim in limits.items())
    acceptance("CORDIC accuracy", ok, f"{detail}; softmax worst |sum-1| {sm:.2e} (<= 1e-3) over 10000 vectors")
    assert ok


def test_systolic_equivalence_and_timing(acceptance):
    rng = np.random.default_rng(2027)
    modes = list(MacMode)
    bad = 0
    elements = 0
    for i in range(50):
        mode = modes[i % len(modes)]
        M, K, N = (int(v) for v in rng.integers(1, [17, 49, 17]))
        g = ArrayGeometry(*(int(v) for v in rng.integers(1, 9, size=2)))
        hi = 1 << mode.lane_format.bits
        a, b = rng.integers(0, hi, size=(M, K)), rng.integers(0, hi, size=(K, N))
        out = (ScalarFormat.FP8, ScalarFormat.BF16)[i % 2]
        c, exc, _ = matmul_codes(a, b, mode, out, g)
        av, bv = decode_array(a, mode.lane_format), decode_array(b, mode.lane_format)
        for r in range(M):
            for col in range(N):
                want = dot_product(av[r].tolist(), bv[:, col].tolist(), mode, out)
                bad += int(want.value.bits != c[r, col] or want.exception != exc[r, col])
                elements += 1
    g4 = ArrayGeometry(4, 4)
    cycles = (cycle_model(4, 4, 4, g4, MacMode.BF16X1), cycle_model(8, 4, 8, g4, MacMode.BF16X1),
              cycle_model(4, 24, 4, g4, MacMode.INT4X6))
    ok = bad == 0 and cycles == (15, 48, 15)
    acceptance("Systolic equivalence + timing", ok,
               f"{bad} mismatches over {elements} elements in 50 shape/geometry combos; cycles {cycles} vs (15, 48, 15)")
    assert ok


def test_simd_speedup_ratios(acceptance):
    g = ArrayGeometry(8, 8)
    bf = cycle_model(64, 600, 64, g, MacMode.BF16X1)
    r4 = bf / cycle_model(64, 600, 64, g, MacMode.INT4X6)
    r8 = bf / cycle_model(64, 600, 64, g, MacMode.FP8X3)
    ok = 5.4 <= r4 <= 6.6 and 2.7 <= r8 <= 3.3
    acceptance("SIMD speedup ratios", ok, f"Bf16/Int4x6 {r4:.3f} in [5.4, 6.6]; Bf16/Fp8x3 {r8:.3f} in [2.7, 3.3]")
    assert ok


def test_model_size_reproduction(acceptance, tmp_path, capsys):
    path = tmp_path / "size.json"
    code = main(["--out", str(path), "size-report", "--params", "600e6", "--formats", "fp32,bf16,fp4"])
    capsys.readouterr()
    rep = json.loads(path.read_text())
    m = {r["name"]: r["value"] for r in rep["metrics"]}
    ratio, gb = m["fp4.ratio_vs_fp32"], m["fp4.bytes"] / 1e9
    calib = m.get("calibration.retained_bf16_fraction")
    ok = 3.9 <= ratio <= 4.3 and abs(gb - 0.56) <= 0.056 and calib is not None and code == 0
    acceptance("Model-size reproduction", ok,
               f"Fp32/Fp4 ratio {ratio:.3f} in [3.9, 4.3]; Fp4 footprint {gb:.4f} GB vs 0.56 +/- 10%; "
               f"retained BF16 fraction {calib} (printed in report)")
    assert ok


def test_transformer_properties(acceptance, seed_suite):
    n = len(seed_suite)
    residual = sum(r.residual_identity for r in seed_suite)
    causal = sum(r.causal for r in seed_suite)
    gate_err = max(r.gate_sum_err for r in seed_suite)
    lbs = [v for r in seed_suite for v in r.lb_losses]
    lb_low = [(r.seed, round(v, 4)) for r in seed_suite for v in r.lb_losses if v < 1 - 1e-6]
    bf = [r.deviation[ScalarFormat.BF16] for r in seed_suite]
    over = [(r.seed, round(r.deviation[ScalarFormat.BF16], 4)) for r in seed_suite if r.deviation[ScalarFormat.BF16] > 0.05]
    parts = {
        "residual identity": residual == n,
        "causality": causal == n,
        "gate normalization": gate_err <= 1e-6,
        "lb_loss >= 1 - 1e-6": not lb_low,
        "bf16 deviation <= 0.05": not over,
    }
    ok = all(parts.values())
    detail = (f"residual {residual}/{n}, causal {causal}/{n}, gate sum err {gate_err:.1e}, "
              f"lb_loss min {min(lbs):.4f} ({len(lb_low)}/{len(lbs)} below 1: {lb_low}), "
              f"bf16 deviation max {max(bf):.4f} median {np.median(bf):.4f} ({len(over)}/{n} above 0.05: {over}); "
              f"failing parts: {[k for k, v in parts.items() if not v] or 'none'}")
    acceptance("Transformer properties", ok, detail)
    assert ok


def test_report_precision_chain_distribution(seed_suite, capsys):
    """Not an acceptance criterion: the Int4 -> Fp4 -> Fp8 -> Bf16 monotonicity is a
    reported majority property, so it is printed rather than asserted."""
    mono = 0
    with capsys.disabled():
        print("\nINFO per-seed max-abs logit deviation (" + " / ".join(f.value for f in CHAIN) + "):")
        for r in seed_suite:
            d = [r.deviation[f] for f in CHAIN]
            chain = all(x >= y for x, y in zip(d, d[1:]))
            mono += chain
            print(f"INFO   seed {r.seed:2d}: " + "  ".join(f"{x:.4f}" for x in d) + ("  monotone" if chain else ""))
        print(f"INFO monotone chain on {mono}/{len(seed_suite)} seeds")
