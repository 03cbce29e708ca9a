from __future__ import annotations

from dataclasses import dataclass

from .nodes import (
    ALLOCATOR_ARITY,
    EXTERN_BEHAVIORS,
    MESH_ARITY,
    Call,
    GlobalAddr,
    Phi,
    Program,
    defined_reg,
    used_regs,
)
from .parser import MirError, parse


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int = 0
    function: str | None = None

    def __str__(self) -> str:
        where = f" (in {self.function})" if self.function else ""
        return f"line {self.line}: {self.message}{where}"


def validate(prog: Program) -> list[Diagnostic]:
    """Return every structural problem found; an empty list means valid."""
    diags: list[Diagnostic] = []
    seen: dict[str, str] = {}
    for kind, items in (("global", prog.globals), ("extern", prog.externs), ("function", prog.functions)):
        for item in items:
            if item.name in seen:
                line = getattr(item, "line", 0)
                diags.append(Diagnostic(f"duplicate name {item.name!r} ({seen[item.name]} and {kind})", line))
            else:
                seen[item.name] = kind
    for g in prog.globals:
        if g.size <= 0:
            diags.append(Diagnostic(f"global {g.name!r} has non-positive size {g.size}", g.line))
    for e in prog.externs:
        if e.returns_arg is not None and not 0 <= e.returns_arg < e.nparams:
            diags.append(Diagnostic(f"extern {e.name!r}: returns_arg {e.returns_arg} out of range", e.line))
        if e.effective_behavior not in EXTERN_BEHAVIORS:
            diags.append(Diagnostic(f"extern {e.name!r}: unknown behavior {e.behavior!r}", e.line))

    arity = {f.name: len(f.params) for f in prog.functions}
    arity.update({e.name: e.nparams for e in prog.externs})
    for name, n in {**ALLOCATOR_ARITY, **MESH_ARITY}.items():
        arity.setdefault(name, n)
    globals_ = {g.name for g in prog.globals}

    for fn in prog.functions:
        def report(msg: str, line: int) -> None:
            diags.append(Diagnostic(msg, line, fn.name))

        labels: dict[str, int] = {}
        for b in fn.blocks:
            if b.label in labels:
                report(f"duplicate block label {b.label!r}", b.line)
            labels[b.label] = b.line
        defs: dict[str, int] = {}
        for p in fn.params:
            if p in defs:
                report(f"duplicate parameter {p!r}", fn.line)
            defs[p] = fn.line
        for b in fn.blocks:
            for pos, instr in enumerate(b.instrs):
                d = defined_reg(instr)
                if d is None:
                    continue
                if d in defs:
                    report(f"register {d!r} assigned more than once", b.line_of(pos))
                else:
                    defs[d] = b.line_of(pos)

        preds = fn.predecessors()
        for b in fn.blocks:
            for target in b.successors():
                if target not in labels:
                    report(f"branch to unknown label {target!r}", b.line_of(len(b.instrs)))
            head = True
            for pos, instr in enumerate(b.instrs):
                line = b.line_of(pos)
                if isinstance(instr, Phi):
                    if not head:
                        report("phi after a non-phi instruction", line)
                    srcs = [lbl for lbl, _ in instr.incoming]
                    for lbl in srcs:
                        if lbl not in preds.get(b.label, ()):
                            report(f"phi source {lbl!r} is not a predecessor of {b.label!r}", line)
                    for lbl in sorted(preds.get(b.label, ()) - set(srcs)):
                        report(f"phi lacks a value for predecessor {lbl!r}", line)
                    if len(set(srcs)) != len(srcs):
                        report("phi lists a predecessor twice", line)
                else:
                    head = False
                if isinstance(instr, Call):
                    if instr.callee not in arity:
                        report(f"call to undeclared function {instr.callee!r}", line)
                    elif arity[instr.callee] != len(instr.args):
                        report(
                            f"call to {instr.callee!r} passes {len(instr.args)} arguments, expected {arity[instr.callee]}",
                            line,
                        )
                if isinstance(instr, GlobalAddr) and instr.name not in globals_:
                    report(f"unknown global {instr.name!r}", line)
                for r in used_regs(instr):
                    if r not in defs:
                        report(f"unknown register {r!r}", line)
            for r in used_regs(b.term):
                if r not in defs:
                    report(f"unknown register {r!r}", b.line_of(len(b.instrs)))
    return diags


def load_program(text: str) -> Program:
    """Parse and validate; raise MirError at the first diagnostic."""
    prog = parse(text)
    diags = validate(prog)
    if diags:
        d = diags[0]
        raise MirError(f"{d.message}" + (f" (in {d.function})" if d.function else ""), d.line, 1)
    return prog
