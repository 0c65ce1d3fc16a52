"""A toy MoE encoder-decoder decoded through each precision path.

Random-init weights (there is no training): the point is how often each
quantized path reproduces the float64 decode token for token.
"""
import numpy as np

from nlpe.bench import agreement, paired_decodes, random_sources
from nlpe.numerics import ScalarFormat
from nlpe.transformer import ModelConfig, model_size_report

cfg = ModelConfig(n_layers_enc=2, n_layers_dec=2, seed=0)
sources = random_sources(12, np.random.default_rng(0), cfg.vocab_size)
for fmt in (ScalarFormat.BF16, ScalarFormat.FP8, ScalarFormat.FP4, ScalarFormat.INT4):
    pairs = paired_decodes(sources, fmt, cfg, max_len=6)
    seq, tok = agreement(pairs)
    print(f"{fmt.value:5} sequence agreement {seq:5.0%}  token agreement {tok:5.0%}   e.g. {pairs[0].ref} vs {pairs[0].test}")

print("\nfootprint of a 600M-parameter model (BF16 kept for norms, gates and embeddings):")
for fmt in (ScalarFormat.REF, ScalarFormat.BF16, ScalarFormat.FP8, ScalarFormat.FP4):
    r = model_size_report(ModelConfig(), fmt)
    print(f"  {('fp32' if fmt is ScalarFormat.REF else fmt.value):5} {r.bytes / 1e9:6.3f} GB  {r.ratio:.2f}x smaller")
