"""One 24-bit word, three personalities.

The MAC unit packs 1 BF16, 3 FP8 or 6 FP4/INT4 lanes into the same operand
word and accumulates into a wide quire. This demo traces a few issues and
compares issue counts for a length-600 dot product.
"""
import numpy as np

from nlpe.numerics import MacMode, ScalarFormat
from nlpe.simd_mac import dot_product, mac_cycles

print("INT4x6: [1, 2, 3, -4, 5, 6] . [1]*6, one issue:")
r = dot_product([1, 2, 3, -4, 5, 6], [1] * 6, MacMode.INT4X6, trace=print)
print("  ->", r.value.value)

print("\nFP8x3 with a saturating read-out (448 is the largest E4M3 value):")
r = dot_product([448.0] * 3, [448.0] * 3, MacMode.FP8X3, ScalarFormat.FP8)
print(f"  -> {r.value.value} exception={r.exception}")

rng = np.random.default_rng(1)
a, b = rng.normal(size=600), rng.normal(size=600)
print("\nlength-600 dot product, same data in each mode:")
for mode in (MacMode.BF16X1, MacMode.FP8X3, MacMode.FP4X6):
    r = dot_product(a, b, mode)
    print(f"  {mode.value:7} value {r.value.value:+9.4f}  cycles {mac_cycles(mode, 600):4d}")
print(f"  float64 reference {a @ b:+9.4f}")
