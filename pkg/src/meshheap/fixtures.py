"""Bug-corpus fixtures: a ``name.mir`` program plus a ``name.expect`` sidecar.

The sidecar holds ``key = value`` lines::

    tag_bits = 4          # optional, default 17
    wrap = true           # optional, default false
    exit = violation      # normal | violation | fault
    kind = UseAfterFree   # violation fixtures only
    function = main
    site = 5              # source-level instruction index within the function
    outputs = 1 2 3       # printed values before the program stopped
    imprecise = true      # completes normally although the program is buggy

``imprecise`` fixtures are excluded from output-preservation comparisons
against uninstrumented runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .interp import ExecutionReport, ExitStatus, RunConfig, run_instrumented
from .mir import load_program
from .runtime import ViolationKind
from .sim_memory import DEFAULT_SAFE_HEAP_SIZE

_EXITS = {"normal": ExitStatus.NORMAL, "violation": ExitStatus.ABORTED, "fault": ExitStatus.FAULT}
_KEYS = {"tag_bits", "wrap", "exit", "kind", "function", "site", "outputs", "imprecise"}


class ExpectationError(ValueError):
    pass


def _bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise ExpectationError(f"expected true or false, got {text!r}")
    return text == "true"


@dataclass
class Expectation:
    exit: ExitStatus = ExitStatus.NORMAL
    kind: ViolationKind | None = None
    function: str | None = None
    site: int | None = None
    outputs: list[int] | None = None
    tag_bits: int = 17
    wrap: bool = False
    imprecise: bool = False

    @property
    def violation_free(self) -> bool:
        return self.exit is ExitStatus.NORMAL and not self.imprecise


def parse_expectation(text: str) -> Expectation:
    fields: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in _KEYS:
            raise ExpectationError(f"line {n}: unknown or malformed entry {raw.strip()!r}")
        fields[key] = value
    exp = Expectation()
    try:
        if "exit" in fields:
            exp.exit = _EXITS[fields["exit"]]
        if "kind" in fields:
            exp.kind = ViolationKind(fields["kind"])
        exp.function = fields.get("function")
        if "site" in fields:
            exp.site = int(fields["site"])
        if "outputs" in fields:
            exp.outputs = [int(x, 0) for x in fields["outputs"].split()]
        exp.tag_bits = int(fields.get("tag_bits", 17))
        exp.wrap = _bool(fields.get("wrap", "false"))
        exp.imprecise = _bool(fields.get("imprecise", "false"))
    except (KeyError, ValueError) as e:
        raise ExpectationError(f"bad expectation value: {e}") from None
    if exp.exit is ExitStatus.ABORTED and exp.kind is None:
        raise ExpectationError("violation fixtures need a kind")
    return exp


@dataclass
class Fixture:
    name: str
    path: Path
    expectation: Expectation

    def program(self):
        return load_program(self.path.read_text())

    def config(self, oracle: bool = False, safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE) -> RunConfig:
        e = self.expectation
        return RunConfig(tag_bits=e.tag_bits, wrap=e.wrap, safe_heap_size=safe_heap_size, oracle=oracle)


def shipped_corpus() -> Path:
    return Path(str(resources.files("meshheap") / "corpus"))


def load_fixtures(directory: str | Path | None = None) -> list[Fixture]:
    directory = Path(directory) if directory is not None else shipped_corpus()
    if not directory.is_dir():
        raise FileNotFoundError(f"no fixture directory at {directory}")
    out = []
    for mir in sorted(directory.glob("*.mir")):
        side = mir.with_suffix(".expect")
        if not side.exists():
            raise ExpectationError(f"{mir.name} has no .expect sidecar")
        out.append(Fixture(mir.stem, mir, parse_expectation(side.read_text())))
    return out


@dataclass
class FixtureResult:
    fixture: Fixture
    report: ExecutionReport
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    @property
    def observed(self) -> str:
        r = self.report
        if r.violations:
            v = r.violations[0]
            return f"{v.kind}@{v.function}:{v.site}"
        return "fault" if r.exit is ExitStatus.FAULT else "ok"

    @property
    def agreement(self) -> str:
        a = self.report.agreement
        if a is None:
            return "-"
        text = f"{a.agree}/{a.total}"
        if a.expected_imprecision:
            text += f" ({a.expected_imprecision} expected)"
        if a.unprotected:
            text += f" ({a.unprotected} unprotected)"
        if a.unexpected:
            text += f" ({a.unexpected} UNEXPECTED)"
        return text


def compare(exp: Expectation, report: ExecutionReport) -> list[str]:
    problems = []
    if report.exit is not exp.exit:
        problems.append(f"exit {report.exit}, expected {exp.exit}")
    if exp.exit is ExitStatus.ABORTED and report.violations:
        v = report.violations[0]
        if v.kind is not exp.kind:
            problems.append(f"kind {v.kind}, expected {exp.kind}")
        if exp.function is not None and v.function != exp.function:
            problems.append(f"function {v.function}, expected {exp.function}")
        if exp.site is not None and v.site != exp.site:
            problems.append(f"site {v.site}, expected {exp.site}")
    if exp.outputs is not None and report.outputs != exp.outputs:
        problems.append(f"outputs {report.outputs}, expected {exp.outputs}")
    if report.agreement is not None and report.agreement.unexpected:
        problems.append(f"{report.agreement.unexpected} unexplained oracle disagreements")
    if report.ghost.elided_tagged:
        problems.append(f"{report.ghost.elided_tagged} unchecked accesses saw a tagged pointer")
    return problems


def run_fixture(
    fx: Fixture, oracle: bool = False, optimize: bool = True, safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE
) -> FixtureResult:
    report = run_instrumented(fx.program(), fx.config(oracle, safe_heap_size), optimize=optimize)
    return FixtureResult(fx, report, compare(fx.expectation, report))


def run_corpus(
    directory: str | Path | None = None,
    oracle: bool = False,
    optimize: bool = True,
    safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE,
) -> list[FixtureResult]:
    return [run_fixture(fx, oracle, optimize, safe_heap_size) for fx in load_fixtures(directory)]


def format_table(results: list[FixtureResult], oracle: bool = False) -> str:
    header = ["fixture", "expected", "observed", "result"]
    if oracle:
        header.insert(3, "agreement")
    rows = [header]
    for r in results:
        e = r.fixture.expectation
        expected = f"{e.kind}@{e.function}:{e.site}" if e.kind else str(e.exit)
        row = [r.fixture.name, expected, r.observed, "pass" if r.ok else "FAIL: " + "; ".join(r.problems)]
        if oracle:
            row.insert(3, r.agreement)
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header) - 1)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) + "  " + row[-1] for row in rows]
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} fixtures pass")
    return "\n".join(lines)
