"""Mini-IR data model.

Registers and labels are plain strings. Instructions are frozen
dataclasses; a block is a list of instructions closed by one terminator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

WIDTHS = {"i8": 1, "i16": 2, "i32": 4, "i64": 8}
WIDTH_NAMES = {v: k for k, v in WIDTHS.items()}

BINOPS = ("add", "sub", "mul")
PREDICATES = ("eq", "ne", "ult", "ule", "ugt", "uge", "slt", "sle", "sgt", "sge")

# Source-level allocator names and the runtime entry point each one maps to.
ALLOCATOR_INTRINSICS = {
    "malloc": "mesh_malloc",
    "new": "mesh_malloc",
    "free": "mesh_free",
    "delete": "mesh_free",
    "calloc": "mesh_calloc",
    "realloc": "mesh_realloc",
    "memalign": "mesh_memalign",
}
ALLOCATOR_ARITY = {"malloc": 1, "new": 1, "free": 1, "delete": 1, "calloc": 2, "realloc": 2, "memalign": 2}
MESH_ARITY = {"mesh_malloc": 1, "mesh_free": 1, "mesh_calloc": 2, "mesh_realloc": 2, "mesh_memalign": 2}

EXTERN_BEHAVIORS = (
    "identity-return",
    "normal-heap-alloc",
    "normal-heap-free",
    "byte-sink",
    "byte-source",
    "opaque",
)


@dataclass(frozen=True)
class Const:
    dst: str
    value: int


@dataclass(frozen=True)
class Alloca:
    dst: str
    size: int


@dataclass(frozen=True)
class GlobalAddr:
    dst: str
    name: str


@dataclass(frozen=True)
class Load:
    dst: str
    width: int
    addr: str


@dataclass(frozen=True)
class Store:
    width: int
    value: str
    addr: str


@dataclass(frozen=True)
class PtrAdd:
    dst: str
    base: str
    offset: Union[str, int]


@dataclass(frozen=True)
class BinOp:
    dst: str
    op: str
    lhs: str
    rhs: str


@dataclass(frozen=True)
class ICmp:
    dst: str
    pred: str
    lhs: str
    rhs: str


@dataclass(frozen=True)
class Phi:
    dst: str
    incoming: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Call:
    dst: str | None
    callee: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Print:
    value: str


# Instrumentation intrinsics.


@dataclass(frozen=True)
class Check:
    """Combined safety check before a ``width``-byte access through ``addr``."""

    width: int
    addr: str


@dataclass(frozen=True)
class ArgCheck:
    """Boundary check of a value about to be handed to external code."""

    value: str


@dataclass(frozen=True)
class Strip:
    dst: str
    src: str


@dataclass(frozen=True)
class TagOf:
    dst: str
    src: str


@dataclass(frozen=True)
class Retag:
    dst: str
    src: str
    tag: str


@dataclass(frozen=True)
class Br:
    target: str


@dataclass(frozen=True)
class CondBr:
    cond: str
    if_true: str
    if_false: str


@dataclass(frozen=True)
class Ret:
    value: str | None = None


Instr = Union[
    Const, Alloca, GlobalAddr, Load, Store, PtrAdd, BinOp, ICmp, Phi, Call, Print,
    Check, ArgCheck, Strip, TagOf, Retag,
]
Terminator = Union[Br, CondBr, Ret]
INTRINSIC_TYPES = (Check, ArgCheck, Strip, TagOf, Retag)


@dataclass
class Block:
    label: str
    instrs: list[Instr] = field(default_factory=list)
    term: Terminator = field(default_factory=Ret)
    line: int = field(default=0, compare=False)
    # Source line of each instruction, then of the terminator.
    lines: list[int] = field(default_factory=list, compare=False, repr=False)

    def line_of(self, pos: int) -> int:
        return self.lines[pos] if pos < len(self.lines) else self.line

    def successors(self) -> tuple[str, ...]:
        t = self.term
        if isinstance(t, Br):
            return (t.target,)
        if isinstance(t, CondBr):
            return (t.if_true, t.if_false)
        return ()


@dataclass
class Function:
    name: str
    params: list[str]
    blocks: list[Block]
    line: int = field(default=0, compare=False)

    def block_map(self) -> dict[str, Block]:
        return {b.label: b for b in self.blocks}

    def predecessors(self) -> dict[str, set[str]]:
        preds: dict[str, set[str]] = {b.label: set() for b in self.blocks}
        for b in self.blocks:
            for s in b.successors():
                preds.setdefault(s, set()).add(b.label)
        return preds


@dataclass(frozen=True)
class Global:
    name: str
    size: int
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ExternDecl:
    name: str
    nparams: int
    returns_arg: int | None = None
    behavior: str | None = None
    line: int = field(default=0, compare=False)

    @property
    def effective_behavior(self) -> str:
        if self.behavior is not None:
            return self.behavior
        return "identity-return" if self.returns_arg is not None else "opaque"

    @property
    def returns_value(self) -> bool:
        return self.effective_behavior in ("identity-return", "normal-heap-alloc", "byte-sink", "byte-source")


@dataclass
class Program:
    globals: list[Global] = field(default_factory=list)
    externs: list[ExternDecl] = field(default_factory=list)
    functions: list[Function] = field(default_factory=list)

    def function(self, name: str) -> Function | None:
        for f in self.functions:
            if f.name == name:
                return f
        return None

    def extern(self, name: str) -> ExternDecl | None:
        for e in self.externs:
            if e.name == name:
                return e
        return None


def defined_reg(instr: Instr) -> str | None:
    return getattr(instr, "dst", None)


def used_regs(instr: Instr | Terminator) -> list[str]:
    """Registers read by an instruction or terminator, in operand order."""
    if isinstance(instr, (Const, Alloca, GlobalAddr)):
        return []
    if isinstance(instr, Load):
        return [instr.addr]
    if isinstance(instr, Store):
        return [instr.value, instr.addr]
    if isinstance(instr, PtrAdd):
        return [instr.base] + ([instr.offset] if isinstance(instr.offset, str) else [])
    if isinstance(instr, (BinOp, ICmp)):
        return [instr.lhs, instr.rhs]
    if isinstance(instr, Phi):
        return [r for _, r in instr.incoming]
    if isinstance(instr, Call):
        return list(instr.args)
    if isinstance(instr, Print):
        return [instr.value]
    if isinstance(instr, Check):
        return [instr.addr]
    if isinstance(instr, ArgCheck):
        return [instr.value]
    if isinstance(instr, (Strip, TagOf)):
        return [instr.src]
    if isinstance(instr, Retag):
        return [instr.src, instr.tag]
    if isinstance(instr, CondBr):
        return [instr.cond]
    if isinstance(instr, Ret):
        return [instr.value] if instr.value is not None else []
    return []


def is_access(instr: Instr) -> bool:
    return isinstance(instr, (Load, Store))


def source_sites(fn: Function) -> dict[tuple[str, int], int]:
    """Map each ``(block label, position)`` to a source-level site index.

    Instrumentation intrinsics do not advance the counter; each one maps to
    the next source instruction it guards. Rewritten calls replace their
    source call one-for-one, so indices line up between the original
    program and any instrumented version of it.
    """
    sites: dict[tuple[str, int], int] = {}
    counter = 0
    for b in fn.blocks:
        pending: list[int] = []
        for pos, instr in enumerate(b.instrs):
            if isinstance(instr, Retag):
                sites[(b.label, pos)] = counter - 1
                continue
            if isinstance(instr, INTRINSIC_TYPES):
                pending.append(pos)
                continue
            for p in pending:
                sites[(b.label, p)] = counter
            pending.clear()
            sites[(b.label, pos)] = counter
            counter += 1
        for p in pending:
            sites[(b.label, p)] = counter - 1
    return sites
