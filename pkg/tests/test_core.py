import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlpe.core import (
    BufferRole,
    BufferSpec,
    CoreConfig,
    CoreError,
    Instruction,
    LayerKind,
    LayerSpec,
    MemoryModel,
    Opcode,
    PerfCounters,
    Program,
    Unit,
    build_layer_program,
    default_buffers,
    execute,
    layer_tensors,
    parse_config,
    parse_program,
    report,
    schedule_cycles,
    tensor_bytes,
    tokens_per_second,
)
from nlpe.numerics import MacMode, Tensor

I = Instruction.make

FFN = LayerSpec(LayerKind.FFN, d_model=16, d_ffn=32, seq=4)
ATT = LayerSpec(LayerKind.ATTENTION, d_model=16, seq=4, n_heads=2)


def _run(layers, seed=0, **cfg):
    config = CoreConfig(**cfg)
    prog = build_layer_program(layers, config)
    return execute(prog, layer_tensors(layers, np.random.default_rng(seed)), config)


# -- programs -----------------------------------------------------------------------


def test_ffn_program_sequence():
    prog = build_layer_program([FFN])
    assert prog.opcodes() == [Opcode.LOAD, Opcode.MATMUL, Opcode.NAF, Opcode.LOAD, Opcode.MATMUL, Opcode.STORE]
    assert prog.instructions[2].get("kind") == "gelu"
    assert [i.get("tensor") for i in prog.instructions if i.opcode is Opcode.LOAD] == ["l0_w1", "l0_w2"]


def test_attention_counts_per_head():
    prog = build_layer_program([ATT])
    for h in range(ATT.n_heads):
        mine = [i for i in prog.instructions if i.get("head") == str(h)]
        assert sum(i.opcode is Opcode.MATMUL for i in mine) == 2
        assert [i.get("kind") for i in mine if i.opcode is Opcode.NAF] == ["softmax"]


def test_empty_program():
    prog = build_layer_program([])
    assert len(prog) == 0
    out, c = execute(prog, {})
    assert out == {} and c.total_cycles == 0 and c.mac_ops == c.naf_ops == 0 and c.energy_pj == 0
    with pytest.raises(CoreError):
        report(c)


def test_layers_separated_by_sync_and_chained():
    prog = build_layer_program([FFN, FFN])
    assert prog.opcodes().count(Opcode.SYNC) == 1
    second = prog.instructions[prog.opcodes().index(Opcode.SYNC) + 2]
    assert second.opcode is Opcode.MATMUL and second.get("a") == "l0_y"


def test_weight_capacity_checked_at_build():
    with pytest.raises(CoreError):
        build_layer_program([LayerSpec(LayerKind.FFN, d_model=64, d_ffn=128)], CoreConfig(buffer_bytes=1024))


def test_program_text_round_trip():
    prog = build_layer_program([FFN, ATT])
    back = parse_program(prog.to_text())
    assert back.instructions == prog.instructions
    assert back.buffers == prog.buffers and back.bindings == prog.bindings


def test_parse_errors():
    with pytest.raises(CoreError):
        parse_program("FROB x=1\n")
    with pytest.raises(CoreError):
        parse_program("LOAD tensor=w\n")
    with pytest.raises(CoreError):
        parse_program("LOAD tensor w\n")
    assert parse_program("# only a comment\n\n").instructions == []


# -- timing ---------------------------------------------------------------------------


def _steps(*items):
    return [(ins, cyc, frozenset(bufs)) for ins, cyc, bufs in items]


def test_dependent_load_then_matmul_is_serial():
    load = I(Opcode.LOAD, tensor="w", buffer="weight")
    mm = I(Opcode.MATMUL, a="x", b="w", c="y", buffer="output")
    assert schedule_cycles(_steps((load, 100, {"weight"}), (mm, 50, {"input", "weight", "output"}))) == 150


def test_independent_load_overlaps_matmul():
    mm = I(Opcode.MATMUL, a="x", b="wa", c="y", buffer="output")
    load = I(Opcode.LOAD, tensor="wb", buffer="weight")
    steps = _steps((mm, 80, {"input", "scratchpad", "output"}), (load, 100, {"weight"}))
    assert schedule_cycles(steps) == 100
    assert schedule_cycles(steps, overlap=False) == 180


def test_memory_model():
    m = MemoryModel(64, 16)
    assert m.transfer_cycles(0) == 64 and m.transfer_cycles(17) == 66
    with pytest.raises(CoreError):
        MemoryModel(0, 16)


def test_execute_counts_load_cycles():
    w = Tensor.ref(np.ones((4, 4)))
    prog = Program([I(Opcode.LOAD, tensor="w", buffer="weight")], default_buffers())
    _, c = execute(prog, {"w": w}, CoreConfig(offchip_latency=36, bandwidth=1))
    assert c.total_cycles == 36 + 64 == c.busy[Unit.MRU]


@pytest.mark.parametrize("layers", [[FFN], [ATT], [FFN, ATT, LayerSpec(LayerKind.MOE_EXPERT, 16, 32, 4, mode=MacMode.FP8X3)]])
def test_overlap_never_changes_values(layers):
    o1, c1 = _run(layers, overlap=True)
    o2, c2 = _run(layers, overlap=False)
    assert o1.keys() == o2.keys()
    for k in o1:
        assert np.array_equal(o1[k].values(), o2[k].values())
    assert c1.total_cycles <= c2.total_cycles
    for c in (c1, c2):
        assert all(b <= c.total_cycles for b in c.busy.values())


def test_values_match_standalone_units():
    from nlpe.cordic import CordicConfig, NafKind, naf_eval_array, to_precision
    from nlpe.numerics import ScalarFormat
    from nlpe.systolic import block_scaled_matmul

    t = layer_tensors([FFN], np.random.default_rng(3))
    out, _ = execute(build_layer_program([FFN]), t)
    g = CoreConfig().geometry
    h = block_scaled_matmul(t["x"].values(), t["l0_w1"], MacMode.BF16X1, g)
    a = naf_eval_array(to_precision(h, ScalarFormat.BF16), NafKind.GELU, CordicConfig())
    a = to_precision(a, ScalarFormat.BF16)
    y = block_scaled_matmul(a, t["l0_w2"], MacMode.BF16X1, g)
    assert np.array_equal(out["l0_y"].values(), y)


def test_bytes_conservation():
    layers = [FFN, ATT]
    config = CoreConfig()
    prog = build_layer_program(layers, config)
    tensors = layer_tensors(layers, np.random.default_rng(1))
    out, c = execute(prog, tensors, config)
    loaded = sum(tensor_bytes(tensors[i.get("tensor")]) for i in prog.instructions if i.opcode is Opcode.LOAD)
    stored = sum(tensor_bytes(out[i.get("tensor")]) for i in prog.instructions if i.opcode is Opcode.STORE)
    assert c.bytes_moved == loaded + stored


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 500), st.integers(1, 500))
def test_latency_monotone(lat1, lat2):
    lo, hi = sorted((lat1, lat2))
    assert _run([FFN, FFN], offchip_latency=lo)[1].total_cycles <= _run([FFN, FFN], offchip_latency=hi)[1].total_cycles


# -- errors ------------------------------------------------------------------------------


def test_unresolved_operand_and_buffer():
    with pytest.raises(CoreError):
        execute(Program([I(Opcode.LOAD, tensor="nope", buffer="weight")], default_buffers()), {})
    with pytest.raises(CoreError):
        execute(Program([I(Opcode.LOAD, tensor="w", buffer="nope")], default_buffers()), {"w": Tensor.ref([1.0])})
    with pytest.raises(CoreError):
        execute(Program([I(Opcode.STORE, tensor="ghost")], default_buffers()), {})
    with pytest.raises(CoreError):
        I(Opcode.MATMUL, a="x")


def test_capacity_exceeded_at_runtime():
    bufs = [BufferSpec("weight", 8, BufferRole.WEIGHT)]
    with pytest.raises(CoreError):
        execute(Program([I(Opcode.LOAD, tensor="w", buffer="weight")], bufs), {"w": Tensor.ref(np.ones(4))})
    with pytest.raises(CoreError):
        BufferSpec("x", 0, BufferRole.INPUT)


# -- reporting and energy -----------------------------------------------------------------


def test_tokens_per_second_example():
    assert tokens_per_second(250, 2.5e6) == 100.0


def test_energy_is_linear_in_ops():
    _, c = _run([FFN, ATT])
    assert c.mac_ops > 0 and c.naf_ops > 0
    assert c.energy_pj == c.mac_ops * 10.43 + c.naf_ops * 987.0
    _, c = _run([FFN], naf_pj=0.0)
    assert c.energy_pj == c.mac_ops * 10.43


def test_zero_op_report():
    c = PerfCounters(total_cycles=100)
    r = report(c)
    assert r.gops == 0 and r.energy_pj == 0 and r.pj_per_op == 0


def test_report_fields():
    _, c = _run([FFN])
    r = report(c, CoreConfig(), tokens=4)
    assert math.isclose(r.tokens_per_s, 250e6 / (c.total_cycles / 4))
    assert math.isclose(r.gops, (c.mac_ops + c.naf_ops) * 250e6 / c.total_cycles / 1e9)
    assert 0 < r.naf_share < 1
    assert set(r.to_record()) >= {"tokens_per_s", "gops", "pj_per_op", "naf_share"}


def test_config_parsing(tmp_path):
    cfg = parse_config("clock_mhz = 300  # faster\noverlap=false\nrows=4\n")
    assert cfg.clock_mhz == 300.0 and cfg.overlap is False and cfg.rows == 4 and cfg.cols == 8
    with pytest.raises(CoreError):
        parse_config("bogus=1")
    with pytest.raises(CoreError):
        parse_config("rows")
    with pytest.raises(CoreError):
        parse_config("bandwidth=0")
