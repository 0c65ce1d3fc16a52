"""The instruction-driven core: a program, its timing, and its energy.

Builds an attention + FFN layer program, prints the first instructions,
and compares the cost of each MAC mode including off-chip transfers.
"""
import numpy as np

from nlpe.core import CoreConfig, LayerKind, LayerSpec, build_layer_program, execute, layer_tensors, parse_program, report
from nlpe.numerics import MacMode, Tensor

layers = [LayerSpec(LayerKind.ATTENTION, seq=8), LayerSpec(LayerKind.FFN, seq=8)]
prog = build_layer_program(layers)
print("\n".join(prog.to_text().splitlines()[:10]), "\n...")

cfg = CoreConfig()
for mode in (MacMode.BF16X1, MacMode.FP8X3, MacMode.FP4X6):
    ls = [LayerSpec(l.kind, seq=8, mode=mode) for l in layers]
    _, c = execute(build_layer_program(ls, cfg), layer_tensors(ls, np.random.default_rng(0)), cfg)
    r = report(c, cfg, tokens=8)
    print(f"{mode.value:7} {c.total_cycles:7d} cycles  {r.tokens_per_s:9.0f} tok/s (model)  "
          f"{r.energy_pj / 1e6:6.2f} uJ  activation share {r.naf_share:.1%}")

# In a canonical layer every LOAD feeds the very next MATMUL through the one
# weight buffer, so nothing overlaps. A prefetch into a free buffer does.
text = """
BIND tensor=x buffer=input
LOAD tensor=wa buffer=weight
MATMUL a=x b=wa c=ya buffer=output
LOAD tensor=wb buffer=scratchpad
MATMUL a=x b=wb c=yb buffer=output
STORE tensor=yb
"""
rng = np.random.default_rng(0)
tensors = {"x": Tensor.ref(rng.normal(size=(8, 64))), "wa": Tensor.ref(rng.normal(size=(64, 64))),
           "wb": Tensor.ref(rng.normal(size=(64, 64)))}
_, serial = execute(parse_program(text), tensors, CoreConfig(overlap=False))
_, overlapped = execute(parse_program(text), tensors, cfg)
print(f"\nprefetching wb during the first MATMUL: {serial.total_cycles} -> {overlapped.total_cycles} cycles")
