"""Instrumentation pass inserting safety checks into mini-IR programs.

Every load and store gets a ``check`` on its address followed by a
``strip``; the access then goes through the stripped register. Accesses
whose address is an underived stack or global allocation are left alone.
Allocator calls are redirected to the runtime, and arguments of calls into
external (body-less) functions are checked and stripped at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .mir.nodes import (
    ALLOCATOR_INTRINSICS,
    EXTERN_BEHAVIORS,
    Alloca,
    ArgCheck,
    Block,
    Call,
    Check,
    Function,
    GlobalAddr,
    Load,
    Phi,
    Program,
    Retag,
    Store,
    Strip,
    TagOf,
    defined_reg,
    used_regs,
)

DEFAULT_ALLOCATOR_NAMES = frozenset(("malloc", "free", "calloc", "realloc", "memalign", "new", "delete"))


class InstrumentError(Exception):
    pass


@dataclass(frozen=True)
class InstrumentOptions:
    enable_check_removal: bool = True
    allocator_names: frozenset[str] = field(default=DEFAULT_ALLOCATOR_NAMES)

    def __post_init__(self) -> None:
        if not self.allocator_names:
            raise ValueError("allocator_names must not be empty")
        unknown = set(self.allocator_names) - set(ALLOCATOR_INTRINSICS)
        if unknown:
            raise ValueError(f"no runtime routine for allocator names {sorted(unknown)}")


@dataclass
class InstrumentStats:
    checks_inserted: int = 0
    checks_elided: int = 0
    external_calls_wrapped: int = 0

    @property
    def elided_percent(self) -> float:
        total = self.checks_inserted + self.checks_elided
        return 100.0 * self.checks_elided / total if total else 0.0

    def __iadd__(self, other: InstrumentStats) -> InstrumentStats:
        self.checks_inserted += other.checks_inserted
        self.checks_elided += other.checks_elided
        self.external_calls_wrapped += other.external_calls_wrapped
        return self


def underived_allocations(fn: Function) -> set[str]:
    """Registers holding exactly the address of an alloca or a global.

    A phi joins the set only when all of its sources are in it. Cycles
    through phis never qualify, which keeps the result conservative.
    """
    safe: set[str] = set()
    phis: list[Phi] = []
    for b in fn.blocks:
        for instr in b.instrs:
            if isinstance(instr, (Alloca, GlobalAddr)):
                safe.add(instr.dst)
            elif isinstance(instr, Phi):
                phis.append(instr)
    changed = True
    while changed:
        changed = False
        for phi in phis:
            if phi.dst not in safe and all(r in safe for _, r in phi.incoming):
                safe.add(phi.dst)
                changed = True
    return safe


def analyze_origins(fn: Function) -> set[tuple[str, int]]:
    """Dereference sites ``(block label, position)`` that need no check."""
    safe_regs = underived_allocations(fn)
    sites = set()
    for b in fn.blocks:
        for pos, instr in enumerate(b.instrs):
            if isinstance(instr, (Load, Store)) and instr.addr in safe_regs:
                sites.add((b.label, pos))
    return sites


class _Namer:
    def __init__(self, fn: Function):
        self.taken = set(fn.params)
        for b in fn.blocks:
            for instr in b.instrs:
                d = defined_reg(instr)
                if d:
                    self.taken.add(d)
                self.taken.update(used_regs(instr))
        self.n = 0

    def fresh(self, base: str, suffix: str) -> str:
        while True:
            self.n += 1
            name = f"{base}.{suffix}{self.n}"
            if name not in self.taken:
                self.taken.add(name)
                return name


def instrument_function(
    fn: Function, prog: Program, opts: InstrumentOptions
) -> tuple[Function, InstrumentStats]:
    stats = InstrumentStats()
    elide = analyze_origins(fn) if opts.enable_check_removal else set()
    untagged = underived_allocations(fn)
    namer = _Namer(fn)
    blocks = []
    for b in fn.blocks:
        out: list = []
        lines: list[int] = []

        def emit(instr, line):
            out.append(instr)
            lines.append(line)

        for pos, instr in enumerate(b.instrs):
            line = b.line_of(pos)
            if isinstance(instr, (Load, Store)):
                if (b.label, pos) in elide:
                    stats.checks_elided += 1
                    emit(instr, line)
                    continue
                stats.checks_inserted += 1
                stripped = namer.fresh(instr.addr, "s")
                emit(Check(instr.width, instr.addr), line)
                emit(Strip(stripped, instr.addr), line)
                if isinstance(instr, Load):
                    emit(Load(instr.dst, instr.width, stripped), line)
                else:
                    emit(Store(instr.width, instr.value, stripped), line)
            elif isinstance(instr, Call) and instr.callee in opts.allocator_names:
                emit(Call(instr.dst, ALLOCATOR_INTRINSICS[instr.callee], instr.args), line)
            elif isinstance(instr, Call) and prog.function(instr.callee) is None and prog.extern(instr.callee):
                ext = prog.extern(instr.callee)
                if ext.effective_behavior not in EXTERN_BEHAVIORS:
                    raise InstrumentError(f"extern {ext.name!r} has unknown behavior {ext.behavior!r}")
                args = list(instr.args)
                wrapped = False
                saved_tag = None
                if ext.returns_arg is not None and instr.dst is not None:
                    saved_tag = namer.fresh(args[ext.returns_arg], "tag")
                    emit(TagOf(saved_tag, args[ext.returns_arg]), line)
                    wrapped = True
                for k, a in enumerate(instr.args):
                    if a in untagged:
                        continue
                    s = namer.fresh(a, "s")
                    emit(ArgCheck(a), line)
                    emit(Strip(s, a), line)
                    args[k] = s
                    wrapped = True
                dst = instr.dst
                if saved_tag is not None:
                    dst = namer.fresh(instr.dst, "raw")
                emit(Call(dst, instr.callee, tuple(args)), line)
                if saved_tag is not None:
                    emit(Retag(instr.dst, dst, saved_tag), line)
                if wrapped:
                    stats.external_calls_wrapped += 1
            else:
                emit(instr, line)
        lines.append(b.line_of(len(b.instrs)))
        blocks.append(Block(b.label, out, b.term, b.line, lines))
    return Function(fn.name, list(fn.params), blocks, fn.line), stats


def instrument_program(
    prog: Program, opts: InstrumentOptions | None = None
) -> tuple[Program, InstrumentStats]:
    """Return the instrumented copy of ``prog`` and pass statistics."""
    opts = opts or InstrumentOptions()
    total = InstrumentStats()
    functions = []
    for fn in prog.functions:
        new_fn, stats = instrument_function(fn, prog, opts)
        functions.append(new_fn)
        total += stats
    return Program(list(prog.globals), list(prog.externs), functions), total


def count_accesses(prog: Program) -> int:
    return sum(isinstance(i, (Load, Store)) for f in prog.functions for b in f.blocks for i in b.instrs)
