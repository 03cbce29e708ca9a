"""Interpreter for mini-IR programs over the simulated address space.

Runs raw or instrumented programs. Instrumentation intrinsics and the
``mesh_*`` allocator routines go to the runtime; source-level allocator
names (``malloc``, ``free``, ...) are served by the plain normal-heap
allocator, as an uninstrumented C program linked against libc would be.

With ``oracle=True`` every value also carries ghost provenance (the id of
the heap object it was derived from) and each access is judged by the
shadow map as well, producing per-access agreement records.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .instrument import InstrumentStats
from .mir.nodes import (
    INTRINSIC_TYPES,
    Alloca,
    ArgCheck,
    BinOp,
    Br,
    Call,
    Check,
    CondBr,
    Const,
    Function,
    GlobalAddr,
    ICmp,
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
    source_sites,
)
from .oracle import AccessRecord, AgreementSummary, ShadowMap, compare_reports
from .runtime import MeshRuntime, MeshViolation, RuntimeStats, Violation, ViolationKind
from .sim_memory import DEFAULT_SAFE_HEAP_SIZE, AddressSpace, MemoryFault
from .tagged_ptr import MASK64, TagConfig, to_signed

DEFAULT_STEP_LIMIT = 10**8
STACK_ALIGN = 16


class ExitStatus(enum.Enum):
    NORMAL = "normal"
    ABORTED = "aborted-on-violation"
    FAULT = "fault"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class RunConfig:
    tag_bits: int = 17
    wrap: bool = False
    safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE
    abort_on_violation: bool = True
    step_limit: int = DEFAULT_STEP_LIMIT
    oracle: bool = False


@dataclass(frozen=True)
class ViolationRecord:
    function: str
    block: str
    site: int
    violation: Violation

    @property
    def kind(self) -> ViolationKind:
        return self.violation.kind


@dataclass
class GhostStats:
    elided_accesses: int = 0
    elided_tagged: int = 0


@dataclass
class ExecutionReport:
    outputs: list[int] = field(default_factory=list)
    violations: list[ViolationRecord] = field(default_factory=list)
    runtime_stats: RuntimeStats = field(default_factory=RuntimeStats)
    instrument_stats: InstrumentStats | None = None
    exit: ExitStatus = ExitStatus.NORMAL
    fault: str | None = None
    return_value: int | None = None
    steps: int = 0
    ghost: GhostStats = field(default_factory=GhostStats)
    accesses: list[AccessRecord] = field(default_factory=list)
    oracle_violations: list[tuple[str, int, ViolationKind]] = field(default_factory=list)
    agreement: AgreementSummary | None = None

    def signature(self) -> list[tuple[str, str, int]]:
        """Kinds and faulting sites, the part of a report that must be stable."""
        return [(str(v.kind), v.function, v.site) for v in self.violations]


class _Abort(Exception):
    pass


class _StepLimit(Exception):
    pass


def _is_instrumented(prog: Program) -> bool:
    for fn in prog.functions:
        for b in fn.blocks:
            for i in b.instrs:
                if isinstance(i, INTRINSIC_TYPES) or (isinstance(i, Call) and i.callee.startswith("mesh_")):
                    return True
    return False


class _FnInfo:
    def __init__(self, fn: Function, instrumented: bool):
        self.fn = fn
        self.blocks = fn.block_map()
        self.entry = fn.blocks[0]
        self.sites = source_sites(fn)
        stripped = {i.dst for b in fn.blocks for i in b.instrs if isinstance(i, Strip)}
        # Accesses left without a check by the instrumentation pass.
        self.elided = set()
        if instrumented:
            for b in fn.blocks:
                for pos, i in enumerate(b.instrs):
                    if isinstance(i, (Load, Store)) and i.addr not in stripped:
                        self.elided.add((b.label, pos))


class _Frame:
    __slots__ = ("info", "regs", "prov", "block", "pos", "sp", "ret_dst")

    def __init__(self, info: _FnInfo, sp: int, ret_dst: str | None):
        self.info = info
        self.regs: dict[str, int] = {}
        self.prov: dict[str, int | None] = {}
        self.block = info.entry
        self.pos = 0
        self.sp = sp
        self.ret_dst = ret_dst


def _icmp(pred: str, a: int, b: int) -> bool:
    if pred == "eq":
        return a == b
    if pred == "ne":
        return a != b
    if pred[0] == "s":
        a, b = to_signed(a), to_signed(b)
    op = pred[1:]
    if op == "lt":
        return a < b
    if op == "le":
        return a <= b
    if op == "gt":
        return a > b
    return a >= b


class Interpreter:
    def __init__(self, prog: Program, config: RunConfig = RunConfig()):
        self.prog = prog
        self.config = config
        self.cfg = TagConfig(config.tag_bits)
        self.space = AddressSpace(safe_heap_size=config.safe_heap_size)
        self.rt = MeshRuntime(self.cfg, config.wrap, self.space)
        self.instrumented = _is_instrumented(prog)
        self.infos = {fn.name: _FnInfo(fn, self.instrumented) for fn in prog.functions}
        self.report = ExecutionReport()
        self.ghost_on = config.oracle
        self.shadow = ShadowMap(self.space) if self.ghost_on else None
        self.row_owner: dict[int, int] = {}
        # Ghost provenance of pointer values stored in memory, keyed by (address, width).
        self._mem_prov: dict[tuple[int, int], int | None] = {}
        self.globals: dict[str, int] = {}
        self._layout_globals()
        self.stack_top = self.space.stack.end
        self.stack_floor = self.space.stack.base

    # -- setup ---------------------------------------------------------------

    def _layout_globals(self) -> None:
        addr = self.space.globals.base
        for g in self.prog.globals:
            self.globals[g.name] = addr
            addr += (g.size + 15) & ~15
        if addr > self.space.globals.end:
            raise MemoryFault(self.space.globals.base, addr - self.space.globals.base, "globals do not fit")

    # -- ghost ---------------------------------------------------------------

    def _ghost_alloc(self, p: int, size: int) -> int | None:
        if not self.ghost_on or p == 0:
            return None
        tag, address = p >> self.cfg.address_bits, p & self.cfg.address_mask
        obj = self.shadow.allocate(address, size, tag)
        if tag:
            self.row_owner[tag] = obj.id
            if not self.config.wrap:
                assert self.rt.row(tag) == (obj.base, obj.end), "ghost bounds diverge from table row"
        return obj.id

    def assert_ghost_matches_table(self) -> None:
        """Every live tagged ghost object has exactly its table row, and vice versa."""
        live_rows = {}
        for tag, oid in self.row_owner.items():
            obj = self.shadow.objects[oid]
            if obj.live:
                live_rows[tag] = (obj.base, obj.end)
        # Without wrap-around only rows above the index were ever handed out.
        for tag in range(self.rt.index + 1, self.cfg.table_rows):
            if self.rt.row_valid(tag) or tag in live_rows:
                assert self.rt.row(tag) == live_rows.get(tag), f"ghost and table disagree on row {tag}"

    def _ghost_release_at(self, p: int) -> None:
        """Release the ghost object the runtime just freed through ``p``."""
        if not self.ghost_on:
            return
        tag, address = p >> self.cfg.address_bits, p & self.cfg.address_mask
        if tag:
            owner = self.row_owner.get(tag)
            if owner is not None and self.shadow.objects[owner].live:
                self.shadow.release(owner)
            return
        oid = self.shadow.owner.get(address)
        if oid is not None and self.shadow.objects[oid].base == address:
            self.shadow.release(oid)
        else:
            for obj in self.shadow.objects.values():
                if obj.live and obj.size == 0 and obj.base == address:
                    self.shadow.release(obj.id)
                    break

    def _record_access(self, op: str, mesh: ViolationKind | None, p: int, prov: int | None,
                       size: int, frame: _Frame, pos: int) -> None:
        address = p & self.cfg.address_mask
        if op == "free":
            oracle = self.shadow.check_free(prov, address)
        else:
            oracle = self.shadow.check(prov, address, size)
        tag = p >> self.cfg.address_bits
        obj = self.shadow.objects.get(prov) if prov is not None else None
        owner = self.row_owner.get(tag) if tag else None
        owner_obj = self.shadow.objects.get(owner) if owner is not None else None
        site = frame.info.sites[(frame.block.label, pos)]
        rec = AccessRecord(
            op, mesh, oracle, p, address, size, prov,
            obj.tag if obj else None, obj.region if obj else None, tag, owner,
            (owner_obj.base, owner_obj.end) if owner_obj and owner_obj.live else None,
            frame.info.fn.name, site,
        )
        self.report.accesses.append(rec)
        if oracle is not None:
            self.report.oracle_violations.append((frame.info.fn.name, site, oracle))

    # -- violations ------------------------------------------------------------

    def _violate(self, v: Violation, frame: _Frame, pos: int) -> None:
        site = frame.info.sites[(frame.block.label, pos)]
        self.report.violations.append(ViolationRecord(frame.info.fn.name, frame.block.label, site, v))
        if self.config.abort_on_violation:
            raise _Abort()

    # -- execution -------------------------------------------------------------

    def run(self) -> ExecutionReport:
        report = self.report
        main = self.infos.get("main")
        if main is None:
            raise ValueError("program has no 'main' function")
        frame = _Frame(main, self.stack_top, None)
        for p in main.fn.params:
            frame.regs[p] = 0
            frame.prov[p] = None
        frame.block = main.entry
        self.stack: list[_Frame] = [frame]
        self._enter_block(frame, None)
        try:
            self._loop()
        except _Abort:
            report.exit = ExitStatus.ABORTED
        except _StepLimit:
            report.exit = ExitStatus.FAULT
            report.fault = f"step limit of {self.config.step_limit} exceeded"
        except MemoryFault as e:
            report.exit = ExitStatus.FAULT
            report.fault = str(e)
        if report.exit is ExitStatus.NORMAL and report.violations:
            report.exit = ExitStatus.ABORTED
        report.runtime_stats = self.rt.snapshot()
        if self.ghost_on and self.instrumented:
            report.agreement = compare_reports(report.accesses)
        return report

    def _enter_block(self, frame: _Frame, pred: str | None) -> None:
        """Evaluate the leading phis of ``frame.block`` simultaneously."""
        instrs = frame.block.instrs
        pos = 0
        updates = []
        while pos < len(instrs) and isinstance(instrs[pos], Phi):
            phi = instrs[pos]
            for label, reg in phi.incoming:
                if label == pred:
                    updates.append((phi.dst, frame.regs[reg], frame.prov.get(reg)))
                    break
            else:
                raise MemoryFault(0, 0, f"phi in {frame.block.label!r} has no value for predecessor {pred!r}")
            pos += 1
        for dst, val, prov in updates:
            frame.regs[dst] = val
            frame.prov[dst] = prov
        frame.pos = pos
        self.report.steps += pos

    def _loop(self) -> None:
        report = self.report
        cfg = self.cfg
        amask = cfg.address_mask
        shift = cfg.address_bits
        space = self.space
        rt = self.rt
        ghost = self.ghost_on
        limit = self.config.step_limit
        while self.stack:
            frame = self.stack[-1]
            regs = frame.regs
            prov = frame.prov
            instrs = frame.block.instrs
            pos = frame.pos
            if pos >= len(instrs):
                report.steps += 1
                if report.steps > limit:
                    raise _StepLimit()
                self._terminate(frame)
                continue
            instr = instrs[pos]
            frame.pos = pos + 1
            report.steps += 1
            if report.steps > limit:
                raise _StepLimit()
            t = type(instr)

            if t is Load or t is Store:
                addr = regs[instr.addr]
                if (frame.block.label, pos) in frame.info.elided:
                    report.ghost.elided_accesses += 1
                    if addr >> shift:
                        report.ghost.elided_tagged += 1
                    if ghost:
                        self._record_access("load" if t is Load else "store", None, addr,
                                            prov.get(instr.addr), instr.width, frame, pos)
                elif ghost and not self.instrumented:
                    self._record_access("load" if t is Load else "store", None, addr,
                                        prov.get(instr.addr), instr.width, frame, pos)
                if t is Load:
                    regs[instr.dst] = space.read_int(addr, instr.width)
                    if ghost:
                        prov[instr.dst] = self._mem_prov.get((addr & amask, instr.width))
                else:
                    space.write_int(addr, instr.width, regs[instr.value])
                    if ghost:
                        self._store_prov(addr & amask, instr.width, prov.get(instr.value))
            elif t is Check:
                p = regs[instr.addr]
                v = rt.safety_check(p, instr.width)
                if ghost:
                    self._record_access("check", v.kind if v else None, p, prov.get(instr.addr),
                                        instr.width, frame, pos)
                if v is not None:
                    self._violate(v, frame, pos)
            elif t is Strip:
                regs[instr.dst] = regs[instr.src] & amask
                prov[instr.dst] = prov.get(instr.src)
            elif t is Const:
                regs[instr.dst] = instr.value & MASK64
                prov[instr.dst] = None
            elif t is PtrAdd:
                off = instr.offset if isinstance(instr.offset, int) else regs[instr.offset]
                regs[instr.dst] = (regs[instr.base] + off) & MASK64
                prov[instr.dst] = prov.get(instr.base)
            elif t is BinOp:
                a, b = regs[instr.lhs], regs[instr.rhs]
                if instr.op == "add":
                    regs[instr.dst] = (a + b) & MASK64
                    pa, pb = prov.get(instr.lhs), prov.get(instr.rhs)
                    prov[instr.dst] = pa if pa is not None else pb
                elif instr.op == "sub":
                    regs[instr.dst] = (a - b) & MASK64
                    prov[instr.dst] = prov.get(instr.lhs) if prov.get(instr.rhs) is None else None
                else:
                    regs[instr.dst] = (a * b) & MASK64
                    prov[instr.dst] = None
            elif t is ICmp:
                regs[instr.dst] = int(_icmp(instr.pred, regs[instr.lhs], regs[instr.rhs]))
                prov[instr.dst] = None
            elif t is Alloca:
                size = (max(instr.size, 1) + STACK_ALIGN - 1) & ~(STACK_ALIGN - 1)
                sp = self.stack_top - size
                if sp < self.stack_floor:
                    raise MemoryFault(sp, size, "stack overflow")
                self.stack_top = sp
                space.fill(sp, size)
                regs[instr.dst] = sp
                prov[instr.dst] = None
            elif t is GlobalAddr:
                regs[instr.dst] = self.globals[instr.name]
                prov[instr.dst] = None
            elif t is Print:
                report.outputs.append(regs[instr.value])
            elif t is Call:
                self._call(frame, instr, pos)
            elif t is ArgCheck:
                p = regs[instr.value]
                if p >> shift:
                    # Zero-width: live object, address inside or one past the end.
                    v = rt.safety_check(p, 0)
                    if v is not None:
                        self._violate(v, frame, pos)
            elif t is TagOf:
                regs[instr.dst] = regs[instr.src] >> shift
                prov[instr.dst] = prov.get(instr.src)
            elif t is Retag:
                raw = regs[instr.src] & amask
                tag = regs[instr.tag]
                regs[instr.dst] = (tag << shift) | raw if raw else 0
                prov[instr.dst] = prov.get(instr.tag) if raw else None
            elif t is Phi:
                raise MemoryFault(0, 0, "phi after a non-phi instruction")
            else:  # pragma: no cover - exhaustive over Instr
                raise TypeError(f"cannot execute {instr!r}")

    def _store_prov(self, address: int, width: int, p: int | None) -> None:
        d = self._mem_prov
        for a in range(address - 7, address + width):
            for w in (1, 2, 4, 8):
                if a + w > address and a < address + width:
                    d.pop((a, w), None)
        if p is not None:
            d[(address, width)] = p

    def _terminate(self, frame: _Frame) -> None:
        term = frame.block.term
        if isinstance(term, Br):
            self._goto(frame, term.target)
        elif isinstance(term, CondBr):
            self._goto(frame, term.if_true if frame.regs[term.cond] else term.if_false)
        else:
            assert isinstance(term, Ret)
            value = frame.regs[term.value] if term.value is not None else 0
            vprov = frame.prov.get(term.value) if term.value is not None else None
            self.stack.pop()
            self.stack_top = frame.sp
            if self.stack:
                caller = self.stack[-1]
                if frame.ret_dst is not None:
                    caller.regs[frame.ret_dst] = value
                    caller.prov[frame.ret_dst] = vprov
            else:
                self.report.return_value = value

    def _goto(self, frame: _Frame, label: str) -> None:
        pred = frame.block.label
        frame.block = frame.info.blocks[label]
        self._enter_block(frame, pred)

    # -- calls -------------------------------------------------------------------

    def _set(self, frame: _Frame, dst: str | None, value: int, p: int | None = None) -> None:
        if dst is not None:
            frame.regs[dst] = value & MASK64
            frame.prov[dst] = p

    def _call(self, frame: _Frame, instr: Call, pos: int) -> None:
        name = instr.callee
        args = [frame.regs[a] for a in instr.args]
        aprov = [frame.prov.get(a) for a in instr.args]
        info = self.infos.get(name)
        if info is not None:
            callee = _Frame(info, self.stack_top, instr.dst)
            for p, v, pv in zip(info.fn.params, args, aprov):
                callee.regs[p] = v
                callee.prov[p] = pv
            self.stack.append(callee)
            self._enter_block(callee, None)
            return
        if name.startswith("mesh_"):
            self._mesh_call(frame, instr, pos, args, aprov)
            return
        ext = self.prog.extern(name)
        if ext is not None:
            self._extern_call(frame, instr, ext, args, aprov)
            return
        self._plain_alloc_call(frame, instr, pos, args, aprov)

    def _mesh_call(self, frame, instr, pos, args, aprov) -> None:
        rt = self.rt
        name = instr.callee
        try:
            if name == "mesh_malloc":
                p = rt.malloc(args[0])
                self._set(frame, instr.dst, p, self._ghost_alloc(p, args[0]))
            elif name == "mesh_calloc":
                p = rt.calloc(args[0], args[1])
                self._set(frame, instr.dst, p, self._ghost_alloc(p, args[0] * args[1]))
            elif name == "mesh_memalign":
                p = rt.memalign(args[0], args[1])
                self._set(frame, instr.dst, p, self._ghost_alloc(p, args[1]))
            elif name == "mesh_free":
                if self.ghost_on:
                    self._record_access_free(frame, pos, args[0], aprov[0])
                rt.free(args[0])
                self._ghost_release_at(args[0])
            elif name == "mesh_realloc":
                old = args[0]
                if self.ghost_on and old:
                    self._record_access_free(frame, pos, old, aprov[0])
                p = rt.realloc(old, args[1])
                newp = None
                if p and self.ghost_on:
                    if old:
                        self._ghost_release_at(old)
                    newp = self._ghost_alloc(p, args[1])
                self._set(frame, instr.dst, p, newp)
            else:
                raise MemoryFault(0, 0, f"unknown runtime routine {name!r}")
            if self.ghost_on and not self.config.wrap:
                self.assert_ghost_matches_table()
        except MeshViolation as e:
            self._set(frame, instr.dst, 0)
            self._violate(e.violation, frame, pos)

    def _record_access_free(self, frame, pos, p, pv) -> None:
        tag = p >> self.cfg.address_bits
        address = p & self.cfg.address_mask
        if tag:
            mesh = None if self.rt.row_valid(tag) else ViolationKind.DOUBLE_FREE
        else:
            mesh = ViolationKind.ILLEGAL_SAFE_HEAP_FREE if self.space.in_safe_heap(address) else None
        self._record_access("free", mesh, p, pv, 0, frame, pos)

    def _plain_alloc_call(self, frame, instr, pos, args, aprov) -> None:
        """Source allocator names served by the unprotected normal heap."""
        rt = self.rt
        name = instr.callee
        if name in ("malloc", "new"):
            p = rt.nh_alloc(args[0])
            self._set(frame, instr.dst, p, self._ghost_alloc(p, args[0]))
        elif name == "calloc":
            total = args[0] * args[1]
            p = rt.nh_alloc(total) if total <= MASK64 else 0
            if p:
                self.space.fill(p, total)
            self._set(frame, instr.dst, p, self._ghost_alloc(p, total))
        elif name == "memalign":
            p = 0
            if args[0] and args[0] & (args[0] - 1) == 0:
                with rt.lock:
                    p = rt.normal_heap.alloc(args[1], args[0]) or 0
            self._set(frame, instr.dst, p, self._ghost_alloc(p, args[1]))
        elif name in ("free", "delete"):
            if self.ghost_on:
                self._record_access("free", None, args[0], aprov[0], 0, frame, pos)
            self._libc_free(args[0])
        elif name == "realloc":
            old, size = args
            if self.ghost_on and old:
                self._record_access("free", None, old, aprov[0], 0, frame, pos)
            owned = old != 0 and rt.normal_heap.owns(old)
            p = rt.realloc(old, size) if owned else rt.nh_alloc(size)
            newprov = None
            if p and self.ghost_on:
                if owned:
                    self._ghost_release_at(old)
                newprov = self._ghost_alloc(p, size)
            self._set(frame, instr.dst, p, newprov)
        else:
            raise MemoryFault(0, 0, f"call to unknown function {name!r}")

    def _libc_free(self, address: int) -> None:
        # Unknown blocks model undefined behavior as a no-op so buggy programs keep running.
        if address and self.rt.normal_heap.owns(address):
            self.rt.nh_free(address)
            self._ghost_release_at(address)

    def _extern_call(self, frame, instr, ext, args, aprov) -> None:
        behavior = ext.effective_behavior
        space = self.space
        if behavior == "identity-return":
            k = ext.returns_arg or 0
            self._set(frame, instr.dst, args[k], aprov[k])
        elif behavior == "normal-heap-alloc":
            p = self.rt.nh_alloc(args[0] if args else 0)
            self._set(frame, instr.dst, p, self._ghost_alloc(p, args[0] if args else 0))
        elif behavior == "normal-heap-free":
            if args:
                self._libc_free(args[0])
            self._set(frame, instr.dst, 0)
        elif behavior == "byte-sink":
            n = args[1] if len(args) > 1 else 1
            data = space.read_bytes(args[0], n)
            self._set(frame, instr.dst, sum(data))
        elif behavior == "byte-source":
            n = args[1] if len(args) > 1 else 1
            space.write_bytes(args[0], bytes((j * 31 + 7) & 0xFF for j in range(n)))
            self._set(frame, instr.dst, n)
        elif behavior == "opaque":
            self._set(frame, instr.dst, 0)
        else:
            raise MemoryFault(0, 0, f"extern {ext.name!r} has unknown behavior {behavior!r}")


def run(prog: Program, config: RunConfig = RunConfig(),
        instrument_stats: InstrumentStats | None = None) -> ExecutionReport:
    """Execute ``prog`` as given (instrumented or not) and return the report."""
    report = Interpreter(prog, config).run()
    report.instrument_stats = instrument_stats
    return report


def run_uninstrumented(prog: Program, config: RunConfig = RunConfig()) -> ExecutionReport:
    """Baseline run: no checks, every allocation from the plain normal heap."""
    if _is_instrumented(prog):
        raise ValueError("run_uninstrumented expects a program without instrumentation")
    return Interpreter(prog, config).run()


def run_instrumented(prog: Program, config: RunConfig = RunConfig(), optimize: bool = True) -> ExecutionReport:
    """Instrument ``prog`` (unless it already is) and run it."""
    from .instrument import InstrumentOptions, instrument_program

    if _is_instrumented(prog):
        return run(prog, config)
    inst, stats = instrument_program(prog, InstrumentOptions(enable_check_removal=optimize))
    return run(inst, config, stats)


__all__ = [
    "ExecutionReport",
    "ExitStatus",
    "GhostStats",
    "Interpreter",
    "RunConfig",
    "ViolationRecord",
    "run",
    "run_instrumented",
    "run_uninstrumented",
]
