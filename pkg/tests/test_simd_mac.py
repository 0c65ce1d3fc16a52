import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlpe.bench import fp_reference_mismatches, int4_corner_set, int4_oracle_mismatches
from nlpe.mac_reference import ref_dot_codes
from nlpe.numerics import EncodedScalar, MacMode, ScalarFormat, decode_bits, encode_bits, pack
from nlpe.simd_mac import (
    MacIssue,
    Quire,
    RmmecConfig,
    RmmecMode,
    dot_product,
    dot_product_codes,
    issue_words,
    mac_cycles,
    mac_step,
    quire_read,
    rmmec_assignment,
    rmmec_compare,
    rmmec_multiply,
)


def _word(vals, mode):
    fmt = mode.lane_format
    return pack([EncodedScalar(fmt, encode_bits(v, fmt)) for v in vals], mode)


# -- RMMEC blocks -----------------------------------------------------------------


def test_rmmec_multiply_examples():
    assert rmmec_multiply(0xF, 0xF) == 0xE1
    assert rmmec_multiply(0x0, 0x9) == 0
    assert rmmec_multiply(0x7, 0x6) == 0x2A


def test_rmmec_multiply_exhaustive():
    x, y = np.meshgrid(np.arange(16), np.arange(16))
    assert np.array_equal(rmmec_multiply(x, y), x * y)
    with pytest.raises(ValueError):
        rmmec_multiply(16, 1)
    with pytest.raises(ValueError):
        rmmec_multiply(1, 1, RmmecConfig(RmmecMode.EXP_COMPARE))


def test_rmmec_compare_examples():
    assert rmmec_compare([3, 5, 2]) == (5, (2, 0, 3))
    assert rmmec_compare([4, 4, 4]) == (4, (0, 0, 0))
    assert rmmec_compare([0, 15]) == (15, (15, 0))
    with pytest.raises(ValueError):
        rmmec_compare([1, 2, 3, 4])
    with pytest.raises(ValueError):
        rmmec_compare([1], RmmecConfig(RmmecMode.MULTIPLY))


def test_rmmec_budget_per_mode():
    counts = {m: sum(c.block_mode is RmmecMode.MULTIPLY for c in rmmec_assignment(m)) for m in MacMode}
    assert counts == {MacMode.BF16X1: 4, MacMode.FP8X3: 3, MacMode.FP4X6: 6, MacMode.INT4X6: 6}
    assert all(len(rmmec_assignment(m)) == 6 for m in MacMode)


# -- single steps -------------------------------------------------------------------


def test_step_int4_example():
    q = mac_step(MacIssue(_word([1, 2, 3, -4, 5, 6], MacMode.INT4X6), _word([1] * 6, MacMode.INT4X6), None,
                          MacMode.INT4X6), Quire.zero(ScalarFormat.BF16))
    assert q.value == 13
    r = quire_read(q, ScalarFormat.BF16)
    assert r.value.value == 13.0 and not r.exception


def test_step_fp4_example():
    q = mac_step(MacIssue(_word([1.0] * 6, MacMode.FP4X6), _word([1.0] * 6, MacMode.FP4X6), None, MacMode.FP4X6),
                 Quire.zero(ScalarFormat.BF16))
    assert q.value == 6.0


def test_step_bf16_example_with_addend():
    add = EncodedScalar(ScalarFormat.BF16, encode_bits(0.25, ScalarFormat.BF16))
    q = mac_step(MacIssue(_word([1.5], MacMode.BF16X1), _word([2.0], MacMode.BF16X1), add, MacMode.BF16X1),
                 Quire.zero(ScalarFormat.BF16))
    assert q.value == 3.25
    code, exc, _ = ref_dot_codes([encode_bits(1.5, ScalarFormat.BF16)], [encode_bits(2.0, ScalarFormat.BF16)],
                                 MacMode.BF16X1, ScalarFormat.BF16, encode_bits(0.25, ScalarFormat.BF16))
    assert quire_read(q, ScalarFormat.BF16).value.bits == code and not exc


def test_read_examples():
    q = mac_step(MacIssue(_word([1.5], MacMode.BF16X1), _word([2.0], MacMode.BF16X1),
                          EncodedScalar(ScalarFormat.BF16, encode_bits(0.25, ScalarFormat.BF16)), MacMode.BF16X1),
                 Quire.zero(ScalarFormat.BF16))
    # 3.25 = 1.101b x 2^1 fits E4M3 exactly (the FP8 quire is a separate config)
    r8 = dot_product([1.5], [2.0], MacMode.BF16X1, ScalarFormat.FP8, addend=0.25)
    assert r8.value.value == 3.25
    assert q.value == 3.25
    z = quire_read(Quire.zero(ScalarFormat.FP8), ScalarFormat.FP8)
    assert z.value.bits == 0 and not z.exception


def test_addend_format_must_match_quire():
    add = EncodedScalar(ScalarFormat.FP8, 0x38)
    with pytest.raises(ValueError):
        mac_step(MacIssue(_word([1.0], MacMode.BF16X1), _word([1.0], MacMode.BF16X1), add, MacMode.BF16X1),
                 Quire.zero(ScalarFormat.BF16))
    with pytest.raises(ValueError):
        MacIssue(_word([1.0], MacMode.BF16X1), _word([1.0] * 3, MacMode.FP8X3), None, MacMode.BF16X1)


def test_readout_truncates_toward_zero():
    # 1 + 2^-8 + 2^-9 is above BF16 precision; truncation drops the tail
    r = dot_product([1.0, 2.0**-8 + 2.0**-9], [1.0, 1.0], MacMode.BF16X1, ScalarFormat.BF16)
    assert r.value.value == 1.0
    r = dot_product([-1.0, -(2.0**-8 + 2.0**-9)], [1.0, 1.0], MacMode.BF16X1, ScalarFormat.BF16)
    assert r.value.value == -1.0


def test_overflow_saturates_with_exception():
    r = dot_product([448.0] * 3, [448.0] * 3, MacMode.FP8X3, ScalarFormat.FP8)
    assert r.exception and r.value.value == 448.0
    r = dot_product([-448.0] * 3, [448.0] * 3, MacMode.FP8X3, ScalarFormat.FP8)
    assert r.exception and r.value.value == -448.0


def test_trace_one_line_per_issue():
    lines = []
    dot_product(list(range(12)), [1] * 12, MacMode.INT4X6, ScalarFormat.BF16, trace=lines.append)
    assert len(lines) == 2 and all("\n" not in ln for ln in lines)


# -- dot products -------------------------------------------------------------------


def test_dot_examples():
    assert dot_product([1, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0], MacMode.INT4X6).value.value == 1.0
    with pytest.raises(ValueError):
        dot_product([], [], MacMode.INT4X6)
    with pytest.raises(ValueError):
        dot_product([1.0], [1.0, 2.0], MacMode.BF16X1)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(-8, 7), st.integers(-8, 7)), min_size=1, max_size=24))
def test_int4_matches_integer_oracle(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    exact = sum(x * y for x, y in zip(a, b))
    r = dot_product(a, b, MacMode.INT4X6, ScalarFormat.BF16)
    # the quire holds 16 fractional bits plus guards: every such sum is exact in it
    assert r.quire.exact() == exact
    assert r.value.value == float(Fraction(exact)) or abs(exact) >= 256


def test_int4_corner_set_exhaustive():
    a, b = int4_corner_set()
    assert len(a) == (5 + 2) * 5**6
    assert int4_oracle_mismatches(a, b) == 0


@pytest.mark.parametrize("mode", [MacMode.FP4X6, MacMode.FP8X3, MacMode.BF16X1])
def test_fp_modes_match_reference(mode):
    bad, n = fp_reference_mismatches(mode, 1500, np.random.default_rng(3))
    assert n == 1500 and bad == 0


@settings(max_examples=150)
@given(st.sampled_from([MacMode.FP4X6, MacMode.FP8X3, MacMode.BF16X1]), st.sampled_from([ScalarFormat.FP8, ScalarFormat.BF16]),
       st.data())
def test_fp_reference_property(mode, out, data):
    fmt = mode.lane_format
    hi = (1 << fmt.bits) - 1
    k = data.draw(st.integers(1, 3 * mode.lane_count))
    a = data.draw(st.lists(st.integers(0, hi), min_size=k, max_size=k))
    b = data.draw(st.lists(st.integers(0, hi), min_size=k, max_size=k))
    codes, exc, _ = dot_product_codes(np.array([a]), np.array([b]), mode, out)
    want, want_exc, _ = ref_dot_codes(a, b, mode, out)
    assert (int(codes[0]), bool(exc[0])) == (want, want_exc)


@settings(max_examples=100)
@given(st.sampled_from(list(MacMode)), st.data())
def test_lane_permutation_invariance(mode, data):
    fmt = mode.lane_format
    n = mode.lane_count
    pool = [0.0, 0.5, 1.0, -1.5, 3.0, -6.0] if fmt is ScalarFormat.FP4 else (
        list(range(-8, 8)) if fmt is ScalarFormat.INT4 else [0.0, 0.125, -1.0, 2.5, 7.0, -300.0])
    a = data.draw(st.lists(st.sampled_from(pool), min_size=n, max_size=n))
    b = data.draw(st.lists(st.sampled_from(pool), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(n)))
    q1 = dot_product(a, b, mode).quire
    q2 = dot_product([a[i] for i in perm], [b[i] for i in perm], mode).quire
    assert (q1.sign, q1.mant, q1.exp) == (q2.sign, q2.mant, q2.exp)


@given(st.floats(-100, 100, allow_nan=False), st.floats(-100, 100, allow_nan=False))
def test_sign_is_xor(x, y):
    r = dot_product([x], [y], MacMode.BF16X1)
    v = r.value.value
    if v != 0:
        xa = decode_bits(encode_bits(x, ScalarFormat.BF16), ScalarFormat.BF16)
        ya = decode_bits(encode_bits(y, ScalarFormat.BF16), ScalarFormat.BF16)
        assert (v < 0) == ((xa < 0) != (ya < 0))


def test_batched_equals_scalar():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 256, size=(50, 9))
    b = rng.integers(0, 256, size=(50, 9))
    codes, exc, _ = dot_product_codes(a, b, MacMode.FP8X3, ScalarFormat.BF16)
    for i in range(50):
        want, want_exc, _ = ref_dot_codes(a[i].tolist(), b[i].tolist(), MacMode.FP8X3, ScalarFormat.BF16)
        assert (int(codes[i]), bool(exc[i])) == (want, want_exc)


def test_issue_words_pads_last_word():
    words = issue_words([1, 2, 3, 4, 5, 6, 7], [1] * 7, MacMode.INT4X6)
    assert len(words) == 2
    assert words[1][0].raw == 7


# -- cycles ---------------------------------------------------------------------------


def test_mac_cycles_examples():
    assert mac_cycles(MacMode.INT4X6, 6) == 5
    assert mac_cycles(MacMode.BF16X1, 6) == 10
    assert mac_cycles(MacMode.FP8X3, 6) == 6
    with pytest.raises(ValueError):
        mac_cycles(MacMode.BF16X1, 0)


def test_simd_speedup_limit():
    ratio = mac_cycles(MacMode.INT4X6, 6000) / mac_cycles(MacMode.BF16X1, 6000)
    assert abs(ratio - 1 / 6) <= 0.1 / 6
    assert math.isclose(mac_cycles(MacMode.FP8X3, 6000) / mac_cycles(MacMode.BF16X1, 6000), 1 / 3, rel_tol=0.1)
