"""Output-stationary systolic array: values versus timing.

The array result is bit-identical whatever its geometry; only the cycle count
moves. SIMD lanes shrink the K dimension, but the fill/drain skew per tile
does not shrink, which is why 6 lanes give a bit less than 6x.
"""
import numpy as np

from nlpe.numerics import MacMode, ScalarFormat
from nlpe.systolic import ArrayGeometry, cycle_model, matmul_codes, simulate_wavefront

rng = np.random.default_rng(0)
a, b = rng.integers(0, 256, size=(12, 30)), rng.integers(0, 256, size=(30, 10))
for g in (ArrayGeometry(2, 2), ArrayGeometry(4, 8), ArrayGeometry(8, 8)):
    c, _, stats = matmul_codes(a, b, MacMode.FP8X3, ScalarFormat.BF16, g)
    sim = simulate_wavefront(a, b, MacMode.FP8X3, ScalarFormat.BF16, g)
    print(f"{g.rows}x{g.cols}: cycles {stats.cycles:4d} (simulated {sim[2]:4d}), "
          f"utilization {stats.utilization:.2f}, result checksum {int(c.sum())}")

g = ArrayGeometry(8, 8)
bf = cycle_model(64, 600, 64, g, MacMode.BF16X1)
print("\nGEMM 64x600x64 on 8x8:")
for mode in MacMode:
    cyc = cycle_model(64, 600, 64, g, mode)
    print(f"  {mode.value:7} {cyc:6d} cycles, {bf / cyc:.3f}x vs bf16")
