"""Text parser and printer for the mini-IR.

Whitespace and newlines are insignificant; ``#`` starts a comment.
Besides the source grammar the parser accepts the instrumentation forms
``check WIDTH r``, ``argcheck r``, ``r = strip q``, ``r = tagof q`` and
``r = retag q, t`` so that instrumented programs print and re-parse.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .nodes import (
    BINOPS,
    PREDICATES,
    WIDTH_NAMES,
    WIDTHS,
    Alloca,
    ArgCheck,
    BinOp,
    Block,
    Br,
    Call,
    Check,
    CondBr,
    Const,
    ExternDecl,
    Function,
    Global,
    GlobalAddr,
    ICmp,
    Instr,
    Load,
    Phi,
    Print,
    Program,
    PtrAdd,
    Ret,
    Retag,
    Store,
    Strip,
    TagOf,
    Terminator,
)


class MirError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        loc = f"{line}:{col}: " if line else ""
        super().__init__(f"{loc}{message}")
        self.message = message
        self.line = line
        self.col = col


_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+|\#[^\n]*)
  | (?P<nl>\n)
  | (?P<int>-?(?:0[xX][0-9a-fA-F_]+|[0-9][0-9_]*))
  | (?P<name>[A-Za-z_%][\w.%$-]*)
  | (?P<punct>[{}()\[\],:=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise MirError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            tokens.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


TERMINATORS = ("br", "cbr", "ret")


class Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    # -- token helpers -----------------------------------------------------

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, message: str, tok: Token | None = None) -> MirError:
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return MirError(f"{message}, found {found}", tok.line, tok.col)

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind in ("punct", "name")

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.error(f"expected {text!r}")
        return self.advance()

    def name(self, what: str = "name") -> str:
        if self.tok.kind != "name":
            raise self.error(f"expected {what}")
        return self.advance().text

    def integer(self) -> int:
        if self.tok.kind != "int":
            raise self.error("expected integer")
        return int(self.advance().text.replace("_", ""), 0)

    def width(self) -> int:
        t = self.tok
        if t.kind != "name" or t.text not in WIDTHS:
            raise self.error("expected access width (i8, i16, i32, i64)")
        self.advance()
        return WIDTHS[t.text]

    # -- grammar -----------------------------------------------------------

    def program(self) -> Program:
        prog = Program()
        while self.tok.kind != "eof":
            if self.at("global"):
                line = self.advance().line
                prog.globals.append(Global(self.name("global name"), self.integer(), line))
            elif self.at("extern"):
                prog.externs.append(self.extern())
            elif self.at("fn"):
                prog.functions.append(self.function())
            else:
                raise self.error("expected 'global', 'extern' or 'fn'")
        return prog

    def extern(self) -> ExternDecl:
        line = self.expect("extern").line
        name = self.name("extern name")
        self.expect("(")
        nparams = self.integer()
        self.expect(")")
        returns_arg = behavior = None
        while self.at("returns_arg") or self.at("behavior"):
            if self.advance().text == "returns_arg":
                returns_arg = self.integer()
            else:
                behavior = self.name("behavior")
        return ExternDecl(name, nparams, returns_arg, behavior, line)

    def function(self) -> Function:
        line = self.expect("fn").line
        name = self.name("function name")
        self.expect("(")
        params = []
        if not self.at(")"):
            params.append(self.name("parameter"))
            while self.at(","):
                self.advance()
                params.append(self.name("parameter"))
        self.expect(")")
        self.expect("{")
        blocks = []
        while not self.at("}"):
            blocks.append(self.block())
        self.expect("}")
        if not blocks:
            raise MirError(f"function {name!r} has no blocks", line, 1)
        return Function(name, params, blocks, line)

    def block(self) -> Block:
        label_tok = self.tok
        label = self.name("block label")
        self.expect(":")
        block = Block(label, line=label_tok.line)
        while True:
            t = self.tok
            if t.kind == "name" and t.text in TERMINATORS and self.peek().text != "=":
                block.lines.append(t.line)
                block.term = self.terminator()
                return block
            if t.kind == "eof" or self.at("}"):
                raise self.error(f"block {label!r} lacks a terminator")
            block.lines.append(t.line)
            block.instrs.append(self.instr())

    def terminator(self) -> Terminator:
        op = self.advance().text
        if op == "br":
            return Br(self.name("label"))
        if op == "cbr":
            cond = self.name("register")
            self.expect(",")
            t = self.name("label")
            self.expect(",")
            return CondBr(cond, t, self.name("label"))
        # A following "name :" starts the next block, so ret has no value then.
        if self.tok.kind == "name" and self.peek().text != ":":
            return Ret(self.advance().text)
        return Ret(None)

    def call_tail(self, dst: str | None) -> Call:
        callee = self.name("callee")
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.name("argument register"))
            while self.at(","):
                self.advance()
                args.append(self.name("argument register"))
        self.expect(")")
        return Call(dst, callee, tuple(args))

    def instr(self) -> Instr:
        t = self.tok
        if t.kind != "name":
            raise self.error("expected instruction")
        if self.peek().text == "=":
            dst = self.advance().text
            self.advance()
            return self.rhs(dst)
        op = self.advance().text
        if op == "store":
            w = self.width()
            v = self.name("register")
            self.expect(",")
            return Store(w, v, self.name("register"))
        if op == "print":
            return Print(self.name("register"))
        if op == "call":
            return self.call_tail(None)
        if op == "check":
            w = self.width()
            return Check(w, self.name("register"))
        if op == "argcheck":
            return ArgCheck(self.name("register"))
        raise self.error("expected instruction", t)

    def rhs(self, dst: str) -> Instr:
        t = self.tok
        op = self.name("operation")
        if op == "const":
            return Const(dst, self.integer())
        if op == "alloca":
            return Alloca(dst, self.integer())
        if op == "global_addr":
            return GlobalAddr(dst, self.name("global name"))
        if op == "load":
            w = self.width()
            return Load(dst, w, self.name("register"))
        if op == "ptradd":
            base = self.name("register")
            self.expect(",")
            off = self.integer() if self.tok.kind == "int" else self.name("register or integer")
            return PtrAdd(dst, base, off)
        if op in BINOPS:
            lhs = self.name("register")
            self.expect(",")
            return BinOp(dst, op, lhs, self.name("register"))
        if op == "icmp":
            pred_tok = self.tok
            pred = self.name("predicate")
            if pred not in PREDICATES:
                raise self.error("unknown icmp predicate", pred_tok)
            lhs = self.name("register")
            self.expect(",")
            return ICmp(dst, pred, lhs, self.name("register"))
        if op == "phi":
            self.expect("[")
            incoming = []
            while True:
                label = self.name("label")
                self.expect(",")
                incoming.append((label, self.name("register")))
                if not self.at(","):
                    break
                self.advance()
            self.expect("]")
            return Phi(dst, tuple(incoming))
        if op == "call":
            return self.call_tail(dst)
        if op == "strip":
            return Strip(dst, self.name("register"))
        if op == "tagof":
            return TagOf(dst, self.name("register"))
        if op == "retag":
            src = self.name("register")
            self.expect(",")
            return Retag(dst, src, self.name("register"))
        raise self.error("unknown operation", t)


def parse(text: str) -> Program:
    """Parse program text; raises MirError with a line/column on bad input."""
    return Parser(text).program()


# -- printing ------------------------------------------------------------------


def format_instr(instr: Instr | Terminator) -> str:
    match instr:
        case Const(dst, value):
            return f"{dst} = const {value}"
        case Alloca(dst, size):
            return f"{dst} = alloca {size}"
        case GlobalAddr(dst, name):
            return f"{dst} = global_addr {name}"
        case Load(dst, width, addr):
            return f"{dst} = load {WIDTH_NAMES[width]} {addr}"
        case Store(width, value, addr):
            return f"store {WIDTH_NAMES[width]} {value}, {addr}"
        case PtrAdd(dst, base, offset):
            return f"{dst} = ptradd {base}, {offset}"
        case BinOp(dst, op, lhs, rhs):
            return f"{dst} = {op} {lhs}, {rhs}"
        case ICmp(dst, pred, lhs, rhs):
            return f"{dst} = icmp {pred} {lhs}, {rhs}"
        case Phi(dst, incoming):
            return f"{dst} = phi [" + ", ".join(f"{lbl}, {reg}" for lbl, reg in incoming) + "]"
        case Call(dst, callee, args):
            call = f"call {callee}({', '.join(args)})"
            return call if dst is None else f"{dst} = {call}"
        case Print(value):
            return f"print {value}"
        case Check(width, addr):
            return f"check {WIDTH_NAMES[width]} {addr}"
        case ArgCheck(value):
            return f"argcheck {value}"
        case Strip(dst, src):
            return f"{dst} = strip {src}"
        case TagOf(dst, src):
            return f"{dst} = tagof {src}"
        case Retag(dst, src, tag):
            return f"{dst} = retag {src}, {tag}"
        case Br(target):
            return f"br {target}"
        case CondBr(cond, t, f):
            return f"cbr {cond}, {t}, {f}"
        case Ret(value):
            return "ret" if value is None else f"ret {value}"
    raise TypeError(f"not an instruction: {instr!r}")


def format_program(prog: Program) -> str:
    out = []
    for g in prog.globals:
        out.append(f"global {g.name} {g.size}")
    for e in prog.externs:
        line = f"extern {e.name}({e.nparams})"
        if e.returns_arg is not None:
            line += f" returns_arg {e.returns_arg}"
        if e.behavior is not None:
            line += f" behavior {e.behavior}"
        out.append(line)
    if out:
        out.append("")
    for fn in prog.functions:
        out.append(f"fn {fn.name}({', '.join(fn.params)}) {{")
        for b in fn.blocks:
            out.append(f"{b.label}:")
            out.extend(f"  {format_instr(i)}" for i in b.instrs)
            out.append(f"  {format_instr(b.term)}")
        out.append("}")
        out.append("")
    return "\n".join(out)
