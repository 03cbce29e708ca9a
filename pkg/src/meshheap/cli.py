"""Command-line driver.

Exit codes: 0 ok, 1 violation or expectation mismatch, 2 input error,
3 simulator fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .fixtures import ExpectationError, format_table, run_corpus
from .instrument import InstrumentError, InstrumentOptions, instrument_program
from .interp import ExecutionReport, ExitStatus, RunConfig, run, run_instrumented, run_uninstrumented
from .mir import MirError, format_program, load_program
from .replay import ReplayReport, TraceError, load_trace, replay
from .runtime import ROW_BYTES
from .sim_memory import DEFAULT_SAFE_HEAP_SIZE, MemoryFault
from .tagged_ptr import TagConfig

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT, EXIT_FAULT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _tag_bits(text: str) -> int:
    n = int(text)
    if not 1 <= n <= 17:
        raise argparse.ArgumentTypeError("tag bits must be between 1 and 17")
    return n


def _positive(text: str) -> int:
    n = int(text, 0)
    if n <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshheap", description="Tagged-pointer safe heap simulator.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, runtime=True):
        p.add_argument("--out", type=Path, help="also write the report to this file")
        if runtime:
            p.add_argument("--tag-bits", type=_tag_bits, default=17)
            p.add_argument("--wrap", action="store_true", help="reuse freed table rows once the index runs out")
            p.add_argument("--safe-heap-size", type=_positive, default=DEFAULT_SAFE_HEAP_SIZE)

    p = sub.add_parser("instrument", help="print the instrumented program")
    p.add_argument("input", type=Path)
    p.add_argument("--no-opt", action="store_true", help="keep checks on stack and global accesses")
    common(p, runtime=False)

    p = sub.add_parser("run", help="instrument and execute a program")
    p.add_argument("input", type=Path)
    p.add_argument("--no-opt", action="store_true")
    p.add_argument("--oracle", action="store_true", help="compare every check with the brute-force oracle")
    p.add_argument("--uninstrumented", action="store_true", help="run the program as written, without checks")
    common(p)

    p = sub.add_parser("corpus", help="run a directory of fixtures against their expectations")
    p.add_argument("directory", type=Path, nargs="?", help="defaults to the shipped corpus")
    p.add_argument("--no-opt", action="store_true")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--safe-heap-size", type=_positive, default=DEFAULT_SAFE_HEAP_SIZE)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("replay", help="drive the runtime with an allocation trace")
    p.add_argument("trace", type=Path)
    p.add_argument("--threads", type=_positive, default=1)
    common(p)

    p = sub.add_parser("stats", help="table footprint, and runtime statistics for a program")
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--no-opt", action="store_true")
    common(p)
    return parser


def format_report(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _emit(args, items: dict) -> None:
    text = format_report(items)
    sys.stderr.write(text)
    if args.out is not None:
        args.out.write_text(text)


def _read_program(path: Path):
    try:
        text = path.read_text()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    try:
        return load_program(text)
    except MirError as e:
        raise InputError(f"{path}:{e}") from None


def execution_items(report: ExecutionReport, tag_bits: int) -> dict:
    items = {
        "exit": report.exit,
        "outputs": " ".join(map(str, report.outputs)),
        "tag_bits": tag_bits,
        "table_bytes": ROW_BYTES << tag_bits,
    }
    stats = report.runtime_stats.as_dict()
    stats.pop("table_bytes", None)
    items.update(stats)
    if report.instrument_stats is not None:
        s = report.instrument_stats
        items.update(
            checks_inserted=s.checks_inserted,
            checks_elided=s.checks_elided,
            elided_percent=f"{s.elided_percent:.1f}",
            external_calls_wrapped=s.external_calls_wrapped,
        )
    if report.fault:
        items["fault"] = report.fault
    items["violations"] = len(report.violations)
    for n, v in enumerate(report.violations):
        items[f"violation.{n}.kind"] = v.kind
        items[f"violation.{n}.message"] = v.violation.message
        items[f"violation.{n}.function"] = v.function
        items[f"violation.{n}.site"] = v.site
        items[f"violation.{n}.pointer"] = f"{v.violation.pointer:#x}"
    if report.agreement is not None:
        a = report.agreement
        items.update(
            {
                "oracle.accesses": a.total,
                "oracle.agree": a.agree,
                "oracle.expected_imprecision": a.expected_imprecision,
                "oracle.unprotected": a.unprotected,
                "oracle.unexpected": a.unexpected,
            }
        )
    return items


def _exit_for(report: ExecutionReport) -> int:
    if report.exit is ExitStatus.FAULT:
        return EXIT_FAULT
    if report.exit is ExitStatus.ABORTED:
        return EXIT_VIOLATION
    if report.agreement is not None and report.agreement.unexpected:
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_instrument(args) -> int:
    prog = _read_program(args.input)
    try:
        out, stats = instrument_program(prog, InstrumentOptions(enable_check_removal=not args.no_opt))
    except InstrumentError as e:
        raise InputError(str(e)) from None
    header = (
        f"# checks_inserted={stats.checks_inserted}\n"
        f"# checks_elided={stats.checks_elided}\n"
        f"# elided_percent={stats.elided_percent:.1f}\n"
        f"# external_calls_wrapped={stats.external_calls_wrapped}\n\n"
    )
    text = header + format_program(out)
    if args.out is not None:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _config(args, oracle: bool = False) -> RunConfig:
    return RunConfig(tag_bits=args.tag_bits, wrap=args.wrap, safe_heap_size=args.safe_heap_size, oracle=oracle)


def _execute(args, prog, oracle: bool) -> ExecutionReport:
    cfg = _config(args, oracle)
    try:
        if getattr(args, "uninstrumented", False):
            return run_uninstrumented(prog, cfg)
        return run_instrumented(prog, cfg, optimize=not args.no_opt)
    except InstrumentError as e:
        raise InputError(str(e)) from None
    except ValueError as e:
        # Programs that already contain runtime intrinsics run as they are.
        if "instrumented" not in str(e):
            raise
        return run(prog, cfg)


def cmd_run(args) -> int:
    if args.uninstrumented and args.oracle:
        raise InputError("--oracle needs an instrumented run")
    report = _execute(args, _read_program(args.input), args.oracle)
    for value in report.outputs:
        print(value)
    sys.stdout.flush()
    for v in report.violations:
        sys.stderr.write(f"{v.violation.message} in {v.function} at instruction {v.site}\n")
    _emit(args, execution_items(report, args.tag_bits))
    return _exit_for(report)


def cmd_corpus(args) -> int:
    try:
        results = run_corpus(args.directory, args.oracle, not args.no_opt, args.safe_heap_size)
    except (ExpectationError, FileNotFoundError) as e:
        raise InputError(str(e)) from None
    table = format_table(results, args.oracle)
    print(table)
    if args.out is not None:
        args.out.write_text(table + "\n")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VIOLATION


def replay_items(report: ReplayReport) -> dict:
    items = report.as_dict()
    items["exhausted"] = str(report.exhausted).lower()
    for n, (line, v) in enumerate(report.violations):
        items[f"violation.{n}.kind"] = v.kind
        items[f"violation.{n}.message"] = v.message
        items[f"violation.{n}.line"] = line
        items[f"violation.{n}.pointer"] = f"{v.pointer:#x}"
    return items


def cmd_replay(args) -> int:
    try:
        ops = load_trace(args.trace)
    except OSError as e:
        raise InputError(f"{args.trace}: {e.strerror}") from None
    except TraceError as e:
        raise InputError(f"{args.trace}: {e}") from None
    report = replay(ops, args.tag_bits, args.wrap, args.safe_heap_size, args.threads)
    print(
        f"allocations {report.total_allocations}, peak live {report.peak_live}, "
        f"table utilization {report.utilization_percent:.3f}%, table {report.table_bytes} bytes"
    )
    _emit(args, replay_items(report))
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_stats(args) -> int:
    cfg = TagConfig(args.tag_bits)
    items = {
        "tag_bits": cfg.tag_bits,
        "address_bits": cfg.address_bits,
        "table_rows": cfg.table_rows,
        "usable_rows": cfg.table_rows - 1,
        "table_bytes": ROW_BYTES * cfg.table_rows,
    }
    code = EXIT_OK
    if args.input is not None:
        report = _execute(args, _read_program(args.input), False)
        run_items = execution_items(report, args.tag_bits)
        run_items.pop("outputs")
        items.update(run_items)
        code = _exit_for(report)
    text = format_report(items)
    sys.stdout.write(text)
    if args.out is not None:
        args.out.write_text(text)
    return code


COMMANDS = {
    "instrument": cmd_instrument,
    "run": cmd_run,
    "corpus": cmd_corpus,
    "replay": cmd_replay,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    try:
        return COMMANDS[args.subcommand](args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MemoryFault as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
