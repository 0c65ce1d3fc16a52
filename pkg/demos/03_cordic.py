"""Activations from one hyperbolic CORDIC core.

sigmoid = 1 / (1 + exp(-x)), tanh from sigmoid, softmax from exp + divide.
Shows how accuracy improves with iteration count.
"""
from nlpe.bench import naf_error
from nlpe.cordic import CordicConfig, NafKind, naf_eval, naf_vector_cycles, softmax
from nlpe.numerics import ScalarFormat

print("max |error| on a 4096-point grid over [-8, 8], BF16 inputs:")
print(f"{'iters':>5}" + "".join(f"{k.value:>11}" for k in (NafKind.SIGMOID, NafKind.TANH, NafKind.GELU, NafKind.SWISH)))
for it in (8, 12, 16, 20):
    errs = [naf_error(k, ScalarFormat.BF16, it).max_abs for k in (NafKind.SIGMOID, NafKind.TANH, NafKind.GELU, NafKind.SWISH)]
    print(f"{it:>5}" + "".join(f"{e:>11.2e}" for e in errs))

print("\nsigmoid(1) =", naf_eval(1.0, NafKind.SIGMOID))
print("softmax([0, ln 3]) =", softmax([0.0, 1.0986122886681098]))
cfg = CordicConfig()
print(f"\n4 activations take {naf_vector_cycles(4, ScalarFormat.FP8, cfg)} cycles in FP8 (2 lanes) "
      f"and {naf_vector_cycles(4, ScalarFormat.BF16, cfg)} in BF16 (1 lane).")
