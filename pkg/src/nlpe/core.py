"""Instruction-driven NLPE emulator: memory units, matrix engine, activation array.

A program is a flat list of instructions over named tensors held in four
on-chip buffers. ``execute`` runs them in order (values never depend on
timing) and accounts cycles separately, letting an adjacent LOAD/MATMUL pair
overlap when neither touches the other's tensors or buffer.

Program text, one instruction per line::

    BUFFER id=weight capacity=65536 role=weight
    BIND tensor=x buffer=input
    LOAD tensor=w1 buffer=weight
    MATMUL a=x b=w1 c=h buffer=scratchpad mode=bf16x1
    NAF src=h dst=g kind=gelu buffer=scratchpad precision=bf16
    STORE tensor=y
    SYNC

``BUFFER`` and ``BIND`` are declarations (buffers, and tensors already
resident before the program starts); everything else is an instruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cordic import CordicConfig, NafKind, naf_eval_array, naf_vector_cycles, softmax, to_precision
from .numerics import (
    DEFAULT_BLOCK_SIZE,
    MacMode,
    ScalarFormat,
    Tensor,
    quantize_tensor,
    tensor_size_bytes,
)
from .systolic import ArrayGeometry, MmeCounter, block_scaled_matmul


class CoreError(ValueError):
    pass


class Opcode(Enum):
    LOAD = "LOAD"
    STORE = "STORE"
    MATMUL = "MATMUL"
    NAF = "NAF"
    SYNC = "SYNC"


class Unit(Enum):
    MRU = "MRU"  # memory read
    MME = "MME"  # matrix engine
    NMV = "NMV"  # activation vector array
    MWU = "MWU"  # memory write


_UNIT = {Opcode.LOAD: Unit.MRU, Opcode.MATMUL: Unit.MME, Opcode.NAF: Unit.NMV, Opcode.STORE: Unit.MWU}

_REQUIRED = {
    Opcode.LOAD: ("tensor", "buffer"),
    Opcode.STORE: ("tensor",),
    Opcode.MATMUL: ("a", "b", "c", "buffer"),
    Opcode.NAF: ("src", "dst", "kind", "buffer"),
    Opcode.SYNC: (),
}


class BufferRole(Enum):
    INPUT = "input"
    WEIGHT = "weight"
    OUTPUT = "output"
    SCRATCHPAD = "scratchpad"


@dataclass(frozen=True)
class BufferSpec:
    id: str
    capacity: int
    role: BufferRole

    def __post_init__(self):
        if self.capacity <= 0:
            raise CoreError(f"buffer {self.id!r}: capacity must be positive")


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    args: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        missing = [k for k in _REQUIRED[self.opcode] if k not in self.arg_map]
        if missing:
            raise CoreError(f"{self.opcode.value} missing {', '.join(missing)}")

    @classmethod
    def make(cls, opcode: Opcode, **kw) -> "Instruction":
        return cls(opcode, tuple((k, str(v)) for k, v in kw.items()))

    @property
    def arg_map(self) -> dict[str, str]:
        return dict(self.args)

    def get(self, key: str, default=None):
        return self.arg_map.get(key, default)

    def reads(self) -> set[str]:
        a = self.arg_map
        if self.opcode is Opcode.MATMUL:
            return {a["a"], a["b"]}
        if self.opcode is Opcode.NAF:
            return {a["src"]}
        if self.opcode is Opcode.STORE:
            return {a["tensor"]}
        return set()

    def writes(self) -> set[str]:
        a = self.arg_map
        if self.opcode is Opcode.MATMUL:
            return {a["c"]}
        if self.opcode is Opcode.NAF:
            return {a["dst"]}
        if self.opcode is Opcode.LOAD:
            return {a["tensor"]}
        return set()

    def to_text(self) -> str:
        return " ".join([self.opcode.value] + [f"{k}={v}" for k, v in self.args])


@dataclass
class Program:
    instructions: list[Instruction] = field(default_factory=list)
    buffers: list[BufferSpec] = field(default_factory=list)
    bindings: dict[str, str] = field(default_factory=dict)  # resident tensor -> buffer id

    def __len__(self):
        return len(self.instructions)

    def opcodes(self) -> list[Opcode]:
        return [i.opcode for i in self.instructions]

    def to_text(self) -> str:
        lines = [f"BUFFER id={b.id} capacity={b.capacity} role={b.role.value}" for b in self.buffers]
        lines += [f"BIND tensor={t} buffer={b}" for t, b in self.bindings.items()]
        lines += [i.to_text() for i in self.instructions]
        return "\n".join(lines) + "\n"


def _kv(tokens: Sequence[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise CoreError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_program(text: str) -> Program:
    prog = Program()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        kv = _kv(rest, lineno)
        head = head.upper()
        try:
            if head == "BUFFER":
                prog.buffers.append(BufferSpec(kv["id"], int(kv["capacity"]), BufferRole(kv["role"])))
            elif head == "BIND":
                prog.bindings[kv["tensor"]] = kv["buffer"]
            else:
                prog.instructions.append(Instruction(Opcode(head), tuple(kv.items())))
        except KeyError as e:
            raise CoreError(f"line {lineno}: missing {e.args[0]}") from None
        except ValueError as e:
            raise CoreError(f"line {lineno}: {e}") from None
    return prog


# -- configuration ------------------------------------------------------------


@dataclass
class CoreConfig:
    clock_mhz: float = 250.0
    offchip_latency: int = 64  # cycles per transaction
    bandwidth: int = 16  # bytes per cycle
    rows: int = 8
    cols: int = 8
    mac_pj: float = 10.43
    naf_pj: float = 987.0
    buffer_bytes: int = 1 << 20  # capacity of each default buffer
    cordic_iterations: int = 16
    overlap: bool = True

    def __post_init__(self):
        if self.offchip_latency <= 0 or self.bandwidth <= 0:
            raise CoreError("offchip_latency and bandwidth must be positive")
        if self.clock_mhz <= 0:
            raise CoreError("clock_mhz must be positive")
        ArrayGeometry(self.rows, self.cols)

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.rows, self.cols)

    @property
    def memory(self) -> "MemoryModel":
        return MemoryModel(self.offchip_latency, self.bandwidth)


def parse_config(text: str, base: CoreConfig | None = None) -> CoreConfig:
    """``key=value`` lines (``#`` comments) over the defaults."""
    types = {f.name: f.type for f in fields(CoreConfig)}
    values = {f.name: getattr(base or CoreConfig(), f.name) for f in fields(CoreConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CoreError(f"config line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise CoreError(f"config line {lineno}: unknown key {k!r}")
        t = types[k]
        if t == "bool":
            values[k] = v.lower() in ("1", "true", "yes", "on")
        elif t == "float":
            values[k] = float(v)
        else:
            values[k] = int(v)
    return CoreConfig(**values)


def load_config(path) -> CoreConfig:
    return parse_config(Path(path).read_text())


@dataclass(frozen=True)
class MemoryModel:
    offchip_latency: int
    bandwidth: int

    def __post_init__(self):
        if self.offchip_latency <= 0 or self.bandwidth <= 0:
            raise CoreError("offchip_latency and bandwidth must be positive")

    def transfer_cycles(self, nbytes: int) -> int:
        return self.offchip_latency + -(-nbytes // self.bandwidth)


def default_buffers(capacity: int = 1 << 20) -> list[BufferSpec]:
    return [BufferSpec(r.value, capacity, r) for r in BufferRole]


# -- counters -----------------------------------------------------------------


@dataclass
class PerfCounters:
    total_cycles: int = 0
    busy: dict[Unit, int] = field(default_factory=lambda: {u: 0 for u in Unit})
    bytes_moved: int = 0
    mac_ops: int = 0
    naf_ops: int = 0
    energy_pj: float = 0.0

    def to_record(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            **{f"busy_{u.value}": c for u, c in self.busy.items()},
            "bytes_moved": self.bytes_moved,
            "mac_ops": self.mac_ops,
            "naf_ops": self.naf_ops,
            "energy_pj": self.energy_pj,
        }


def tensor_bytes(t: Tensor) -> int:
    return tensor_size_bytes(t.dims, t.format, t.params.block_size if t.params else None)


def schedule_cycles(steps: Sequence[tuple[Instruction, int, frozenset]], overlap: bool = True) -> int:
    """Total cycles for ``(instruction, cycles, buffer ids touched)`` in program order.

    An adjacent LOAD/MATMUL pair (either order) overlaps, costing the max of
    the two, when the MATMUL neither reads nor writes the loaded tensor and
    their buffers are disjoint. Each instruction joins at most one pair, and
    SYNC is a barrier.
    """
    total = 0
    i = 0
    while i < len(steps):
        ins, cyc, bufs = steps[i]
        if overlap and i + 1 < len(steps):
            nxt, cyc2, bufs2 = steps[i + 1]
            if {ins.opcode, nxt.opcode} == {Opcode.LOAD, Opcode.MATMUL}:
                load, mm = (ins, nxt) if ins.opcode is Opcode.LOAD else (nxt, ins)
                if load.get("tensor") not in mm.reads() | mm.writes() and not bufs & bufs2:
                    total += max(cyc, cyc2)
                    i += 2
                    continue
        total += cyc
        i += 1
    return total


# -- execution ----------------------------------------------------------------


def _weight_block(K: int) -> int:
    return DEFAULT_BLOCK_SIZE if K % DEFAULT_BLOCK_SIZE == 0 else K


class Executor:
    """Runs one program against an off-chip tensor store."""

    def __init__(self, program: Program, tensors: Mapping[str, Tensor], config: CoreConfig | None = None):
        self.program = program
        self.offchip = dict(tensors)
        self.cfg = config or CoreConfig()
        buffers = program.buffers or default_buffers(self.cfg.buffer_bytes)
        self.buffers = {b.id: b for b in buffers}
        self.onchip: dict[str, Tensor] = {}
        self.location: dict[str, str] = {}
        for name, buf in program.bindings.items():
            if name not in self.offchip:
                raise CoreError(f"bound tensor {name!r} not provided")
            self._place(name, self.offchip[name], buf)

    def _buffer(self, buf: str) -> BufferSpec:
        if buf not in self.buffers:
            raise CoreError(f"unresolved buffer {buf!r}")
        return self.buffers[buf]

    def _place(self, name: str, t: Tensor, buf: str):
        spec = self._buffer(buf)
        n = tensor_bytes(t)
        if n > spec.capacity:
            raise CoreError(f"tensor {name!r} ({n} B) exceeds buffer {buf!r} ({spec.capacity} B)")
        self.onchip[name] = t
        self.location[name] = buf

    def _get(self, name: str) -> Tensor:
        if name not in self.onchip:
            raise CoreError(f"unresolved operand {name!r}")
        return self.onchip[name]

    def _matmul(self, ins: Instruction, mme: MmeCounter) -> Tensor:
        a = self._get(ins.get("a")).values()
        a = a.reshape(-1, a.shape[-1])
        w = self._get(ins.get("b"))
        mode = MacMode.parse(ins.get("mode", "bf16x1"))
        if len(w.dims) != 2:
            raise CoreError("MATMUL weight must be 2-D")
        if w.format is not mode.lane_format:
            w = quantize_tensor(Tensor.ref(w.values()), mode.lane_format, _weight_block(w.dims[1]))
        out = ScalarFormat.parse(ins.get("out", "bf16"))
        try:
            y = block_scaled_matmul(a, w, mode, self.cfg.geometry, out, mme)
        except ValueError as e:
            raise CoreError(str(e)) from None
        y = y * float(ins.get("scale", 1.0))
        return Tensor.ref(y)

    def _naf(self, ins: Instruction) -> Tensor:
        x = self._get(ins.get("src")).values()
        kind = NafKind.parse(ins.get("kind"))
        prec = ScalarFormat.parse(ins.get("precision", "bf16"))
        cfg = CordicConfig(self.cfg.cordic_iterations, precision=prec)
        xin = to_precision(x, prec)
        y = softmax(xin, cfg) if kind.is_vector else naf_eval_array(xin, kind, cfg)
        return Tensor.ref(to_precision(y, prec).reshape(x.shape))

    def run(self) -> tuple[dict[str, Tensor], PerfCounters]:
        c = PerfCounters()
        mem = self.cfg.memory
        outputs: dict[str, Tensor] = {}
        steps: list[tuple[Instruction, int, frozenset]] = []
        for ins in self.program.instructions:
            op = ins.opcode
            cyc = 0
            bufs: frozenset = frozenset()
            if op is Opcode.LOAD:
                name = ins.get("tensor")
                if name not in self.offchip:
                    raise CoreError(f"unresolved operand {name!r}")
                t = self.offchip[name]
                self._place(name, t, ins.get("buffer"))
                bufs = frozenset({ins.get("buffer")})
                n = tensor_bytes(t)
                c.bytes_moved += n
                cyc = mem.transfer_cycles(n)
            elif op is Opcode.STORE:
                name = ins.get("tensor")
                t = self._get(name)
                outputs[name] = t
                self.offchip[name] = t
                n = tensor_bytes(t)
                c.bytes_moved += n
                cyc = mem.transfer_cycles(n)
            elif op is Opcode.MATMUL:
                mme = MmeCounter()
                t = self._matmul(ins, mme)
                bufs = frozenset({self.location[ins.get("a")], self.location[ins.get("b")], ins.get("buffer")})
                self._place(ins.get("c"), t, ins.get("buffer"))
                c.mac_ops += mme.mac_ops
                cyc = mme.cycles
            elif op is Opcode.NAF:
                t = self._naf(ins)
                self._place(ins.get("dst"), t, ins.get("buffer"))
                prec = ScalarFormat.parse(ins.get("precision", "bf16"))
                c.naf_ops += t.numel
                cyc = naf_vector_cycles(t.numel, prec, CordicConfig(self.cfg.cordic_iterations, precision=prec))
            if op in _UNIT:
                c.busy[_UNIT[op]] += cyc
            steps.append((ins, cyc, bufs))
        total = 0
        start = 0
        for i, (ins, _, _) in enumerate(steps + [(Instruction(Opcode.SYNC), 0, frozenset())]):
            if ins.opcode is Opcode.SYNC:
                total += schedule_cycles(steps[start:i], self.cfg.overlap)
                start = i + 1
        c.total_cycles = total
        c.energy_pj = c.mac_ops * self.cfg.mac_pj + c.naf_ops * self.cfg.naf_pj
        return outputs, c


def execute(program: Program, tensors: Mapping[str, Tensor], config: CoreConfig | None = None):
    """Run ``program``; returns ``(stored outputs, PerfCounters)``."""
    return Executor(program, tensors, config).run()


# -- reporting ----------------------------------------------------------------


@dataclass(frozen=True)
class PerfReport:
    clock_mhz: float
    total_cycles: int
    tokens: int
    cycles_per_token: float
    tokens_per_s: float
    gops: float
    energy_pj: float
    pj_per_op: float
    naf_share: float

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def tokens_per_second(clock_mhz: float, cycles_per_token: float) -> float:
    if cycles_per_token <= 0:
        raise CoreError("cycles per token must be positive")
    return clock_mhz * 1e6 / cycles_per_token


def report(counters: PerfCounters, config: CoreConfig | None = None, tokens: int = 1) -> PerfReport:
    """Model-derived throughput and energy summary (an estimate, not a measurement)."""
    cfg = config or CoreConfig()
    if counters.total_cycles <= 0:
        raise CoreError("cannot report on zero cycles")
    if tokens < 1:
        raise CoreError("tokens must be >= 1")
    ops = counters.mac_ops + counters.naf_ops
    freq = cfg.clock_mhz * 1e6
    cpt = counters.total_cycles / tokens
    return PerfReport(
        clock_mhz=cfg.clock_mhz,
        total_cycles=counters.total_cycles,
        tokens=tokens,
        cycles_per_token=cpt,
        tokens_per_s=tokens_per_second(cfg.clock_mhz, cpt),
        gops=ops * freq / counters.total_cycles / 1e9,
        energy_pj=counters.energy_pj,
        pj_per_op=counters.energy_pj / ops if ops else 0.0,
        naf_share=counters.naf_ops / ops if ops else 0.0,
    )


# -- layer programs -----------------------------------------------------------


class LayerKind(Enum):
    FFN = "ffn"
    ATTENTION = "attention"
    MOE_EXPERT = "moe_expert"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    d_model: int = 64
    d_ffn: int = 128
    seq: int = 8
    n_heads: int = 4
    mode: MacMode = MacMode.BF16X1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _weight_shapes(layer: LayerSpec) -> dict[str, tuple[int, int]]:
    if layer.kind is LayerKind.ATTENTION:
        return {}
    return {"w1": (layer.d_ffn, layer.d_model), "w2": (layer.d_model, layer.d_ffn)}


def _layer_instructions(idx: int, layer: LayerSpec, x: str) -> tuple[list[Instruction], dict[str, str], str]:
    p = f"l{idx}_"
    mode = layer.mode.value
    I = Instruction.make
    if layer.kind is LayerKind.ATTENTION:
        ins, binds = [], {}
        scale = 1.0 / math.sqrt(layer.d_head)
        for h in range(layer.n_heads):
            q, k, vt = f"{p}q{h}", f"{p}k{h}", f"{p}vt{h}"
            binds.update({q: "input", k: "input", vt: "input"})
            ins += [
                I(Opcode.MATMUL, a=q, b=k, c=f"{p}s{h}", buffer="scratchpad", mode=mode, scale=repr(scale), head=h),
                I(Opcode.NAF, src=f"{p}s{h}", dst=f"{p}p{h}", kind="softmax", buffer="scratchpad", head=h),
                I(Opcode.MATMUL, a=f"{p}p{h}", b=vt, c=f"{p}o{h}", buffer="output", mode=mode, head=h),
                I(Opcode.STORE, tensor=f"{p}o{h}"),
            ]
        return ins, binds, f"{p}o{layer.n_heads - 1}"
    w1, w2 = f"{p}w1", f"{p}w2"
    ins = [
        I(Opcode.LOAD, tensor=w1, buffer="weight"),
        I(Opcode.MATMUL, a=x, b=w1, c=f"{p}h", buffer="scratchpad", mode=mode),
        I(Opcode.NAF, src=f"{p}h", dst=f"{p}g", kind="gelu", buffer="scratchpad"),
        I(Opcode.LOAD, tensor=w2, buffer="weight"),
        I(Opcode.MATMUL, a=f"{p}g", b=w2, c=f"{p}y", buffer="output", mode=mode),
        I(Opcode.STORE, tensor=f"{p}y"),
    ]
    return ins, {}, f"{p}y"


def build_layer_program(layers: Sequence[LayerSpec], config: CoreConfig | None = None) -> Program:
    """Canonical LOAD -> MATMUL -> NAF -> STORE sequence per layer, SYNC between layers.

    FFN and MoE-expert layers chain through their outputs; the first layer
    reads the resident input ``x``. Weight sizes are checked against the
    weight buffer here.
    """
    cfg = config or CoreConfig()
    prog = Program(buffers=default_buffers(cfg.buffer_bytes))
    cap = {b.id: b.capacity for b in prog.buffers}
    x = "x"
    for idx, layer in enumerate(layers):
        for wname, shape in _weight_shapes(layer).items():
            fmt = layer.mode.lane_format
            n = tensor_size_bytes(shape, fmt, None if fmt is ScalarFormat.BF16 else _weight_block(shape[1]))
            if n > cap["weight"]:
                raise CoreError(f"layer {idx} {wname}: {n} B exceeds weight buffer ({cap['weight']} B)")
        if idx:
            prog.instructions.append(Instruction(Opcode.SYNC))
        ins, binds, out = _layer_instructions(idx, layer, x)
        prog.instructions += ins
        prog.bindings.update(binds)
        if layer.kind is not LayerKind.ATTENTION:
            x = out
    if any(l.kind is not LayerKind.ATTENTION for l in layers):
        prog.bindings = {"x": "input", **prog.bindings}
    return prog


def layer_tensors(layers: Sequence[LayerSpec], rng: np.random.Generator) -> dict[str, Tensor]:
    """Random operands for a program from :func:`build_layer_program`."""
    out: dict[str, Tensor] = {}
    if any(l.kind is not LayerKind.ATTENTION for l in layers):
        first = next(l for l in layers if l.kind is not LayerKind.ATTENTION)
        out["x"] = Tensor.ref(rng.normal(size=(first.seq, first.d_model)))
    for idx, layer in enumerate(layers):
        p = f"l{idx}_"
        fmt = layer.mode.lane_format
        for wname, (n, k) in _weight_shapes(layer).items():
            w = Tensor.ref(rng.normal(size=(n, k)) / math.sqrt(k))
            out[p + wname] = quantize_tensor(w, fmt, _weight_block(k))
        if layer.kind is LayerKind.ATTENTION:
            for h in range(layer.n_heads):
                out[f"{p}q{h}"] = Tensor.ref(rng.normal(size=(layer.seq, layer.d_head)))
                out[f"{p}k{h}"] = Tensor.ref(rng.normal(size=(layer.seq, layer.d_head)))
                out[f"{p}vt{h}"] = Tensor.ref(rng.normal(size=(layer.d_head, layer.seq)))
    return out
