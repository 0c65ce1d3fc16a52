"""Sub-octet storage formats and block quantization.

Walks through the FP4 (E2M1) value set, FP8 (E4M3) saturation, and what
block-scaled quantization does to a Gaussian weight matrix in each format.
"""
import numpy as np

from nlpe.numerics import ScalarFormat, Tensor, dequantize_tensor, quantize_tensor, representable_values, tensor_size_bytes

print("FP4 (E2M1) can represent:", sorted({abs(float(v)) for v in representable_values(ScalarFormat.FP4)}))
fp8 = representable_values(ScalarFormat.FP8)
print(f"FP8 (E4M3) spans +/-{max(fp8):g} with {len(fp8)} finite values; larger inputs saturate.")

rng = np.random.default_rng(0)
w = Tensor.ref(rng.normal(0, 0.125, size=(256, 256)))
print("\nblock-64 quantization of a 256x256 N(0, 0.125^2) matrix:")
print(f"{'format':>6} {'bytes':>8} {'vs fp32':>8} {'rms err':>10}")
fp32 = tensor_size_bytes(w.dims, ScalarFormat.REF)
for fmt in (ScalarFormat.BF16, ScalarFormat.INT8, ScalarFormat.FP8, ScalarFormat.FP4, ScalarFormat.INT4):
    q = quantize_tensor(w, fmt, 64)
    err = np.sqrt(np.mean((dequantize_tensor(q).values() - w.values()) ** 2))
    n = tensor_size_bytes(w.dims, fmt, None if fmt is ScalarFormat.BF16 else 64)
    print(f"{fmt.value:>6} {n:>8} {fp32 / n:>8.2f} {err:>10.2e}")
