"""Command-line front end: ``python -m nlpe <command> ...``.

Exit status is 0 when every threshold check of the invoked command passes,
1 when one fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .bench import (
    SIZE_FORMATS,
    SPEEDUP_BANDS,
    Check,
    Metric,
    Provenance,
    agreement,
    gemm_speedups,
    mac_verify,
    naf_sweep,
    paired_decodes,
    random_sources,
    size_table,
)
from .core import CoreConfig, LayerKind, LayerSpec, build_layer_program, execute, layer_tensors, parse_config, report
from .cordic import NafKind
from .numerics import MacMode, ScalarFormat
from .tensorio import atomic_write_bytes
from .transformer import REFERENCE_PARAMS, RETAINED_FRACTION, ModelConfig

SCHEMA_VERSION = 1


@dataclass
class Report:
    command: str
    args: dict
    rows: list[Metric] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self, timestamp: str | None = None) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "args": self.args,
            "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "metrics": [r.to_record() for r in self.rows],
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "passed": self.passed,
            **self.extra,
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "command", "name", "value", "unit", "provenance"])
        for r in self.rows:
            rec = r.to_record()
            w.writerow([SCHEMA_VERSION, self.command, rec["name"], rec["value"], rec["unit"], rec["provenance"]])
        for c in self.checks:
            w.writerow([SCHEMA_VERSION, self.command, f"check.{c.name}", int(c.passed), "bool", "measured"])
        return buf.getvalue()


def _csv_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _parse_int(s: str) -> int:
    v = float(s)  # accepts 1e5
    if v != int(v):
        raise argparse.ArgumentTypeError(f"not an integer: {s}")
    return int(v)


class _Usage(Exception):
    """Bad argument value detected after parsing; reported like an argparse error."""


# -- commands -----------------------------------------------------------------


def cmd_mac_verify(args, rng, core: CoreConfig) -> Report:
    modes = list(MacMode) if args.mode == "all" else [MacMode.parse(args.mode)]
    rows, checks = mac_verify(args.trials, modes, rng)
    return Report("mac-verify", {"trials": args.trials, "mode": args.mode}, rows, checks)


def cmd_naf_sweep(args, rng, core: CoreConfig) -> Report:
    kinds = list(NafKind) if args.kind == "all" else [NafKind.parse(k) for k in _csv_list(args.kind)]
    its = [int(i) for i in _csv_list(args.iterations)]
    prec = ScalarFormat.parse(args.precision)
    rows, checks = naf_sweep(kinds, prec, its, rng, args.points, args.vectors)
    if args.grid:
        atomic_write_bytes(args.grid, naf_grid_csv(rows).encode())
    return Report("naf-sweep", {"kind": args.kind, "precision": prec.value, "iterations": its}, rows, checks)


def naf_grid_csv(rows: list[Metric]) -> str:
    """Pivot naf-sweep metric rows into the (kind, precision, iterations, max, mean) grid."""
    grid: dict[tuple, dict] = {}
    for r in rows:
        kind, prec, it, metric = r.name.split(".", 3)
        cell = grid.setdefault((kind, prec, int(it[2:])), {})
        cell[metric] = r.value
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "precision", "iterations", "max_abs_err", "mean_abs_err"])
    for (kind, prec, it), cell in grid.items():
        mx = cell.get("max_abs_err", cell.get("max_row_sum_err"))
        w.writerow([kind, prec, it, repr(float(mx)), repr(float(cell.get("mean_abs_err", mx)))])
    return buf.getvalue()


def k_dominated(K: int, g) -> bool:
    """The SIMD bands only make sense when the 6-lane word stream outlasts the array skew."""
    return -(-K // 6) >= g.rows + g.cols - 1


def _gemm_rows(M, K, N, core: CoreConfig):
    g = core.geometry
    rows, checks = [], []
    for mode, (cycles, ratio) in gemm_speedups(M, K, N, g).items():
        rows.append(Metric(f"gemm.{mode.value}.cycles", cycles, "cycles", Provenance.MODELED))
        rows.append(Metric(f"gemm.{mode.value}.speedup_vs_bf16", ratio, "ratio", Provenance.MODELED))
        if mode in SPEEDUP_BANDS and k_dominated(K, g):
            lo, hi = SPEEDUP_BANDS[mode]
            checks.append(Check(f"gemm.{mode.value}.speedup_band", lo <= ratio <= hi, f"{ratio:.3f} in [{lo}, {hi}]"))
    return rows, checks


def _transformer_rows(core: CoreConfig, rng, seq: int, modes):
    """Encoder+decoder layer stack (attention + FFN per layer) run once per MAC mode."""
    cfg = ModelConfig()
    rows, base = [], None
    for mode in modes:
        layers = []
        for _ in range(cfg.n_layers_enc + cfg.n_layers_dec):
            layers.append(LayerSpec(LayerKind.ATTENTION, cfg.d_model, cfg.d_ffn, seq, cfg.n_heads, mode))
            layers.append(LayerSpec(LayerKind.FFN, cfg.d_model, cfg.d_ffn, seq, cfg.n_heads, mode))
        prog = build_layer_program(layers, core)
        _, counters = execute(prog, layer_tensors(layers, np.random.default_rng(rng.integers(2**32))), core)
        rep = report(counters, core, tokens=seq)
        tag = f"transformer.{mode.value}"
        rows += [Metric(f"{tag}.{k}", v, u, Provenance.MODELED) for k, v, u in (
            ("total_cycles", rep.total_cycles, "cycles"),
            ("cycles_per_token", rep.cycles_per_token, "cycles"),
            ("tokens_per_s_estimate", rep.tokens_per_s, "tokens/s"),
            ("gops", rep.gops, "GOPS"),
            ("energy", rep.energy_pj, "pJ"),
            ("pj_per_op", rep.pj_per_op, "pJ/op"),
            ("naf_share", rep.naf_share, "fraction"),
            ("mac_ops", counters.mac_ops, "ops"),
            ("naf_ops", counters.naf_ops, "ops"),
        )]
        if mode is MacMode.BF16X1:
            base = rep.total_cycles
        elif base is not None:
            rows.append(Metric(f"{tag}.speedup_vs_bf16", base / rep.total_cycles, "ratio", Provenance.MODELED))
    return rows


def cmd_perf(args, rng, core: CoreConfig) -> Report:
    rows, checks = [], []
    for spec in _csv_list(args.workload) if args.workload != "none" else []:
        if spec.startswith("gemm:"):
            try:
                M, K, N = (int(v) for v in spec[5:].split("x"))
            except ValueError:
                raise _Usage(f"bad gemm spec {spec!r}; expected gemm:MxKxN") from None
            r, c = _gemm_rows(M, K, N, core)
            rows += r
            checks += c
        elif spec == "transformer":
            modes = [MacMode.BF16X1] + [m for m in MacMode if m is not MacMode.BF16X1]
            rows += _transformer_rows(core, rng, args.seq, modes)
        else:
            raise _Usage(f"unknown workload {spec!r}")
    return Report("perf", {"workload": args.workload, "rows": core.rows, "cols": core.cols,
                           "clock_mhz": core.clock_mhz}, rows, checks)


def cmd_size_report(args, rng, core: CoreConfig) -> Report:
    names = _csv_list(args.formats)
    fmts = SIZE_FORMATS if names == ["all"] else [ScalarFormat.parse("ref" if n == "fp32" else n) for n in names]
    if args.params < 1:
        raise _Usage("--params must be >= 1")
    rows, checks = size_table(args.params, fmts, args.block_size)
    if args.params != REFERENCE_PARAMS:
        checks = [c for c in checks if not c.name.startswith("fp4.")]  # bands refer to the 600M model
    rows.append(Metric("calibration.retained_bf16_fraction", RETAINED_FRACTION, "fraction", Provenance.CALIBRATED))
    return Report("size-report", {"params": args.params, "formats": names, "block_size": args.block_size},
                  rows, checks)


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split()]
    except ValueError:
        raise _Usage(f"token ids must be integers: {text!r}") from None


def cmd_translate_toy(args, rng, core: CoreConfig) -> Report:
    prec = ScalarFormat.parse(args.precision)
    cfg = ModelConfig(seed=args.seed)
    if args.src is not None:
        sources = [_parse_tokens(args.src)]
        if not sources[0]:
            raise _Usage("empty source sequence")
        bad = [t for t in sources[0] if not 0 <= t < cfg.vocab_size]
        if bad:
            raise _Usage(f"token ids out of range [0, {cfg.vocab_size}): {bad}")
    else:
        if args.batch < 1:
            raise _Usage("--batch must be >= 1")
        sources = random_sources(args.batch, rng, cfg.vocab_size)
    pairs = paired_decodes(sources, prec, cfg, args.max_len)
    seq, tok = agreement(pairs)
    rows = [
        Metric("sequences", len(pairs), "count"),
        Metric("sequence_agreement", seq, "fraction"),
        Metric("token_agreement", tok, "fraction"),
    ]
    outputs = [{"src": p.src, "ref": p.ref, "output": p.test} for p in pairs]
    return Report("translate-toy", {"precision": prec.value, "max_len": args.max_len, "n": len(pairs)},
                  rows, [], {"decodes": outputs})


COMMANDS = {
    "mac-verify": cmd_mac_verify,
    "naf-sweep": cmd_naf_sweep,
    "perf": cmd_perf,
    "size-report": cmd_size_report,
    "translate-toy": cmd_translate_toy,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlpe", description="Sub-octet NLP accelerator emulator benchmarks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value file (clock_mhz, offchip_latency, bandwidth, rows, cols, mac_pj, naf_pj, ...)")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mac-verify", help="MAC datapath vs integer oracle / reference model")
    s.add_argument("--trials", type=_parse_int, default=10_000)
    s.add_argument("--mode", default="all", help="int4x6|fp4x6|fp8x3|bf16x1|all")

    s = sub.add_parser("naf-sweep", help="activation accuracy grid")
    s.add_argument("--kind", default="all", help="comma list of activations, or all")
    s.add_argument("--precision", default="bf16", choices=("bf16", "fp8"))
    s.add_argument("--iterations", default="8,12,16,20", help="comma list of CORDIC iteration counts")
    s.add_argument("--points", type=_parse_int, default=4096)
    s.add_argument("--vectors", type=_parse_int, default=10_000, help="softmax row-sum sample size")
    s.add_argument("--grid", help="also write the kind/precision/iterations error grid as CSV here")

    s = sub.add_parser("perf", help="cycle, throughput and energy model")
    s.add_argument("--workload", default="gemm:64x600x64,transformer",
                   help="comma list of gemm:MxKxN and/or transformer; 'none' for an empty run")
    s.add_argument("--seq", type=int, default=8, help="sequence length for the transformer workload")

    s = sub.add_parser("size-report", help="model footprint per storage format")
    s.add_argument("--params", type=_parse_int, default=REFERENCE_PARAMS)
    s.add_argument("--formats", default="all", help="comma list (fp32,bf16,int8,fp8,fp4,int4) or all")
    s.add_argument("--block-size", type=int, default=64)

    s = sub.add_parser("translate-toy", help="greedy decode through a precision path vs the reference")
    s.add_argument("--src", help="whitespace-separated token ids; omit for a seeded batch")
    s.add_argument("--batch", type=int, default=100)
    s.add_argument("--precision", default="bf16", help="ref|bf16|fp8|fp4|int4")
    s.add_argument("--max-len", type=int, default=8)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        core = CoreConfig()
        if args.config:
            with open(args.config) as fh:
                core = parse_config(fh.read())
        rng = np.random.default_rng(args.seed)
        rep = COMMANDS[args.command](args, rng, core)
    except _Usage as e:
        parser.error(str(e))
    except (ValueError, OSError) as e:
        print(f"nlpe: error: {e}", file=sys.stderr)
        return 2
    text = rep.to_json() if args.format == "json" else rep.to_csv()
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    else:
        sys.stdout.write(text)
    for c in rep.checks:
        if not c.passed:
            print(f"FAIL {c.name} {c.detail}".rstrip(), file=sys.stderr)
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
