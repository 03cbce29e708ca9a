from pathlib import Path

import pytest
from hypothesis import given, settings

from irgen import heap_programs, loop_programs
from meshheap.fixtures import load_fixtures
from meshheap.interp import ExitStatus, RunConfig, run, run_instrumented, run_uninstrumented
from meshheap.instrument import instrument_program
from meshheap.mir import load_program
from meshheap.runtime import ViolationKind as K

FIXTURES = Path(__file__).parent / "fixtures"
ORACLE = RunConfig(oracle=True)


def prog(text):
    return load_program(text)


def test_widths_zero_extend_and_truncate():
    p = prog(
        """
        fn main() {
        entry:
          n = const 8
          buf = call malloc(n)
          big = const 0x1_2345_6789
          store i64 big, buf
          a = load i8 buf
          b = load i16 buf
          c = load i32 buf
          neg = const -1
          store i8 neg, buf
          d = load i64 buf
          print a
          print b
          print c
          print d
          ret
        }
        """
    )
    expected = [0x89, 0x6789, 0x23456789, 0x1_2345_67FF]
    assert run_instrumented(p).outputs == expected
    assert run_uninstrumented(p).outputs == expected


def test_calls_and_recursion():
    p = prog(
        """
        fn fact(n) {
        entry:
          one = const 1
          small = icmp ule n, one
          cbr small, base, step
        base:
          ret one
        step:
          m = sub n, one
          r = call fact(m)
          x = mul n, r
          ret x
        }
        fn main() {
        entry:
          ten = const 10
          f = call fact(ten)
          print f
          ret
        }
        """
    )
    r = run_instrumented(p)
    assert r.outputs == [3628800]
    assert r.exit is ExitStatus.NORMAL


def test_signed_and_unsigned_compare():
    p = prog(
        """
        fn main() {
        entry:
          m = const -1
          z = const 0
          a = icmp ult m, z
          b = icmp slt m, z
          print a
          print b
          ret
        }
        """
    )
    assert run_uninstrumented(p).outputs == [0, 1]


def test_stack_frames_released_on_return():
    p = prog(
        """
        fn leaf() {
        entry:
          a = alloca 64
          ret a
        }
        fn main() {
        entry:
          x = call leaf()
          y = call leaf()
          d = sub x, y
          print d
          ret
        }
        """
    )
    assert run_uninstrumented(p).outputs == [0]


def test_step_limit_stops_infinite_loop():
    p = load_program((FIXTURES / "infinite_loop.mir").read_text())
    r = run_uninstrumented(p, RunConfig(step_limit=10_000))
    assert r.exit is ExitStatus.FAULT
    assert "step limit" in r.fault
    assert run_instrumented(p, RunConfig(step_limit=500)).exit is ExitStatus.FAULT


def test_unmapped_access_is_a_fault_not_a_violation():
    p = prog("fn main() { entry: a = const 0x7000_0000_0000  x = load i8 a  ret }")
    r = run_instrumented(p)
    assert r.exit is ExitStatus.FAULT
    assert r.violations == []


def test_missing_main():
    with pytest.raises(ValueError):
        run(prog("fn helper() { entry: ret }"))


def test_uninstrumented_rejects_instrumented_input():
    inst, _ = instrument_program(prog("fn main() { entry: n = const 1  p = call malloc(n)  ret }"))
    with pytest.raises(ValueError):
        run_uninstrumented(inst)


def test_extern_normal_heap_pointer_passes_checks():
    p = prog(
        """
        extern getbuf(1) behavior normal-heap-alloc
        extern putbuf(1) behavior normal-heap-free
        fn main() {
        entry:
          n = const 32
          b = call getbuf(n)
          v = const 5
          end = ptradd b, 31
          store i8 v, end
          x = load i8 end
          print x
          call putbuf(b)
          ret
        }
        """
    )
    r = run_instrumented(p, ORACLE)
    assert r.exit is ExitStatus.NORMAL and r.outputs == [5]
    assert r.runtime_stats.checks_executed >= 2
    # Normal-heap objects are not protected, so the oracle marks them as such.
    assert r.agreement.unexpected == 0


def test_libc_free_of_extern_buffer():
    p = prog(
        """
        extern getbuf(1) behavior normal-heap-alloc
        fn main() {
        entry:
          n = const 32
          b = call getbuf(n)
          call free(b)
          ret
        }
        """
    )
    assert run_instrumented(p).exit is ExitStatus.NORMAL


def test_byte_behaviors():
    p = prog(
        """
        extern fill(2) behavior byte-source
        extern total(2) behavior byte-sink
        extern nothing(1)
        fn main() {
        entry:
          n = const 4
          buf = call malloc(n)
          w = call fill(buf, n)
          s = call total(buf, n)
          z = call nothing(n)
          print w
          print s
          print z
          ret
        }
        """
    )
    # bytes 7, 38, 69, 100
    assert run_instrumented(p).outputs == [4, 214, 0]
    assert run_uninstrumented(p).outputs == [4, 214, 0]


def test_extern_reading_past_object_caught_at_boundary():
    p = prog(
        """
        extern total(2) behavior byte-sink
        fn main() {
        entry:
          n = const 4
          buf = call malloc(n)
          call free(buf)
          s = call total(buf, n)
          ret
        }
        """
    )
    r = run_instrumented(p)
    assert [v.kind for v in r.violations] == [K.USE_AFTER_FREE]
    assert r.violations[0].site == 3


def test_continue_after_violation_when_not_aborting():
    p = prog(
        """
        fn main() {
        entry:
          n = const 4
          p = call malloc(n)
          q = ptradd p, 4
          x = load i8 q
          y = load i8 q
          print n
          ret
        }
        """
    )
    r = run_instrumented(p, RunConfig(abort_on_violation=False))
    assert [v.site for v in r.violations] == [3, 4]
    assert r.outputs == [4]
    assert r.exit is ExitStatus.ABORTED


def test_reports_are_deterministic():
    for fx in load_fixtures():
        a = run_instrumented(fx.program(), fx.config(oracle=True))
        b = run_instrumented(fx.program(), fx.config(oracle=True))
        assert a == b


def test_ghost_never_sees_tags_at_elided_sites():
    for fx in load_fixtures():
        r = run_instrumented(fx.program(), fx.config(oracle=True))
        assert r.ghost.elided_tagged == 0


def test_buggy_program_runs_to_completion_uninstrumented_but_oracle_notices():
    fx = next(f for f in load_fixtures() if f.name == "heap_overflow")
    r = run_uninstrumented(fx.program(), RunConfig(oracle=True))
    assert r.exit is ExitStatus.NORMAL
    assert [(f, s, k) for f, s, k in r.oracle_violations] == [("main", 8, K.BUFFER_OVERFLOW)]


def _clean(report):
    return report.exit is ExitStatus.NORMAL and not report.oracle_violations


@settings(max_examples=200, deadline=None)
@given(heap_programs())
def test_random_programs_agree_with_oracle(text):
    p = load_program(text)
    r = run_instrumented(p, ORACLE)
    assert r.exit is not ExitStatus.FAULT or "unmapped" in r.fault
    assert r.agreement.unexpected == 0, r.agreement.disagreements
    # Every heap bug the oracle sees stops the instrumented program right there.
    if r.violations:
        first = r.oracle_violations[0] if r.oracle_violations else None
        v = r.violations[0]
        assert first == (v.function, v.site, v.kind)
    noopt = run_instrumented(p, ORACLE, optimize=False)
    assert noopt.signature() == r.signature()
    if _clean(r):
        assert noopt.outputs == r.outputs
        assert run_uninstrumented(p).outputs == r.outputs


@settings(max_examples=60, deadline=None)
@given(loop_programs())
def test_loops_detect_exactly_the_overrun(text):
    p = load_program(text)
    r = run_instrumented(p, ORACLE)
    base = run_uninstrumented(p, ORACLE)
    heap = "malloc" in text
    if heap and base.oracle_violations:
        assert r.signature() == [(str(K.BUFFER_OVERFLOW), "main", base.oracle_violations[0][1])]
        assert r.outputs == base.outputs[: len(r.outputs)]
    else:
        assert r.violations == []
        if not base.oracle_violations:
            assert r.outputs == base.outputs
