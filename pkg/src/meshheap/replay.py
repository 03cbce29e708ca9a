"""Replay allocation traces directly against the runtime.

Trace lines::

    A <id> <size>            allocate and bind the pointer to <id>
    F <id>                   free the pointer bound to <id>
    C <id> <offset> <size>   check a size-byte access at pointer + offset
    # ...                    comment

A freed id keeps its (now dangling) pointer until it is allocated again,
so checks and frees after ``F`` exercise the temporal checks.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple

from .runtime import MeshRuntime, MeshViolation, Violation
from .sim_memory import DEFAULT_SAFE_HEAP_SIZE, AddressSpace, MemoryFault
from .tagged_ptr import TagConfig, ptr_add, tag_of


class TraceError(Exception):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class TraceOp(NamedTuple):
    op: str
    id: str
    size: int = 0
    offset: int = 0
    line: int = 0


_ARITY = {"A": 2, "F": 1, "C": 3}


def _int(text: str, line: int, what: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise TraceError(f"bad {what} {text!r}", line) from None


def parse_trace(text: str) -> list[TraceOp]:
    ops = []
    live: set[str] = set()
    seen: set[str] = set()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        op, args = line[0], line[1:]
        if op not in _ARITY:
            raise TraceError(f"unknown record {op!r}", n)
        if len(args) != _ARITY[op]:
            raise TraceError(f"{op} takes {_ARITY[op]} fields, got {len(args)}", n)
        ident = args[0]
        if op == "A":
            size = _int(args[1], n, "size")
            if size < 0:
                raise TraceError("negative allocation size", n)
            if ident in live:
                raise TraceError(f"id {ident!r} allocated again while still live", n)
            live.add(ident)
            seen.add(ident)
            ops.append(TraceOp("A", ident, size, 0, n))
            continue
        if ident not in seen:
            raise TraceError(f"id {ident!r} used before allocation", n)
        if op == "F":
            live.discard(ident)
            ops.append(TraceOp("F", ident, 0, 0, n))
        else:
            offset = _int(args[1], n, "offset")
            size = _int(args[2], n, "size")
            if size < 0:
                raise TraceError("negative access size", n)
            ops.append(TraceOp("C", ident, size, offset, n))
    return ops


def load_trace(path) -> list[TraceOp]:
    with open(path) as f:
        return parse_trace(f.read())


def partition(ops: list[TraceOp], n: int) -> list[list[TraceOp]]:
    """Split a trace into ``n`` streams, ids dealt round-robin by first appearance."""
    owner: dict[str, int] = {}
    streams: list[list[TraceOp]] = [[] for _ in range(n)]
    for op in ops:
        k = owner.setdefault(op.id, len(owner) % n)
        streams[k].append(op)
    return streams


@dataclass
class ReplayReport:
    tag_bits: int
    threads: int
    total_allocations: int = 0
    peak_live: int = 0
    table_bytes: int = 0
    checks: int = 0
    check_seconds: float = 0.0
    tags: list[int] = field(default_factory=list)
    violations: list[tuple[int, Violation]] = field(default_factory=list)

    @property
    def utilization(self) -> float:
        """Peak live objects as a fraction of the usable table rows."""
        return self.peak_live / ((1 << self.tag_bits) - 1)

    @property
    def utilization_percent(self) -> float:
        return 100.0 * self.utilization

    @property
    def check_ns_mean(self) -> float:
        return 1e9 * self.check_seconds / self.checks if self.checks else 0.0

    @property
    def distinct_tags(self) -> int:
        return len(set(self.tags))

    @property
    def exhausted(self) -> bool:
        return any(v.kind.value == "MetadataExhaustion" for _, v in self.violations)

    def as_dict(self) -> dict:
        return {
            "tag_bits": self.tag_bits,
            "threads": self.threads,
            "total_allocations": self.total_allocations,
            "peak_live": self.peak_live,
            "utilization_percent": f"{self.utilization_percent:.3f}",
            "table_bytes": self.table_bytes,
            "checks": self.checks,
            "check_ns_mean": f"{self.check_ns_mean:.1f}",
            "distinct_tags": self.distinct_tags,
            "violations": len(self.violations),
        }


class _Stream:
    """One thread's view: its own id bindings over the shared runtime."""

    def __init__(self, rt: MeshRuntime):
        self.rt = rt
        self.ptrs: dict[str, int] = {}
        self.tags: list[int] = []
        self.violations: list[tuple[int, Violation]] = []
        self.checks = 0
        self.check_seconds = 0.0
        self.error: BaseException | None = None

    def run(self, ops: list[TraceOp]) -> None:
        try:
            self._run(ops)
        except BaseException as e:  # surfaced by the caller after join
            self.error = e

    def _run(self, ops: list[TraceOp]) -> None:
        rt = self.rt
        check = rt.safety_check
        i = 0
        while i < len(ops):
            op = ops[i]
            if op.op == "C":
                # Time a whole run of consecutive checks at once; resolving
                # pointers happens outside the timed loop.
                j = i
                batch = []
                while j < len(ops) and ops[j].op == "C":
                    c = ops[j]
                    batch.append((ptr_add(self.ptrs[c.id], c.offset), c.size))
                    j += 1
                t0 = time.perf_counter()
                results = [check(p, s) for p, s in batch]
                self.check_seconds += time.perf_counter() - t0
                self.checks += len(batch)
                for k, v in enumerate(results):
                    if v is not None:
                        self.violations.append((ops[i + k].line, v))
                i = j
                continue
            if op.op == "A":
                try:
                    p = rt.malloc(op.size)
                except MeshViolation as e:
                    self.violations.append((op.line, e.violation))
                    p = 0
                else:
                    if p == 0:
                        raise MemoryFault(0, op.size, f"safe heap exhausted at trace line {op.line}")
                    self.tags.append(tag_of(p, rt.cfg))
                self.ptrs[op.id] = p
            else:
                try:
                    rt.free(self.ptrs[op.id])
                except MeshViolation as e:
                    self.violations.append((op.line, e.violation))
            i += 1


def replay(
    ops: list[TraceOp],
    tag_bits: int = 17,
    wrap: bool = False,
    safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE,
    threads: int = 1,
) -> ReplayReport:
    """Drive a fresh runtime with ``ops``; with ``threads > 1`` the trace is partitioned."""
    if threads < 1:
        raise ValueError("threads must be at least 1")
    cfg = TagConfig(tag_bits)
    rt = MeshRuntime(cfg, wrap, AddressSpace(safe_heap_size=safe_heap_size))
    report = ReplayReport(tag_bits, threads)
    streams = [_Stream(rt) for _ in range(threads)]
    if threads == 1:
        streams[0].run(ops)
    else:
        workers = [
            threading.Thread(target=s.run, args=(part,)) for s, part in zip(streams, partition(ops, threads))
        ]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    for s in streams:
        if s.error is not None:
            raise s.error
        report.tags.extend(s.tags)
        report.violations.extend(s.violations)
        report.checks += s.checks
        report.check_seconds += s.check_seconds
    report.violations.sort(key=lambda lv: lv[0])
    stats = rt.stats
    report.total_allocations = stats.total_allocations
    report.peak_live = stats.peak_live_objects
    report.table_bytes = stats.table_bytes
    return report


# -- trace generators ----------------------------------------------------------

SERVER_SIZES = (16, 24, 32, 48, 64, 80, 128, 256, 512, 1024, 2048, 4096)


def _checks(rng: random.Random, ident: str, size: int, n: int) -> list[str]:
    out = []
    for _ in range(n):
        if size == 0:
            break
        width = rng.choice([w for w in (1, 2, 4, 8) if w <= size])
        out.append(f"C {ident} {rng.randrange(size - width + 1)} {width}")
    return out


def server_like_trace(
    total: int = 5211, peak: int = 151, resident: int = 38, seed: int = 5211
) -> str:
    """A bug-free trace shaped like a small event-driven server.

    A handful of long-lived configuration objects stay resident; requests
    then allocate short-lived buffers and release them. One burst of
    concurrent connections drives the live count to exactly ``peak``.
    Exactly ``total`` allocations are made and everything is freed at the end.
    """
    if not 0 < resident < peak <= total:
        raise ValueError("need 0 < resident < peak <= total")
    rng = random.Random(seed)
    lines = [f"# synthetic server trace: {total} allocations, peak {peak} live, seed {seed}"]
    live: dict[str, int] = {}
    transient: list[str] = []
    made = 0
    # Leave enough allocations after the burst starts to actually reach the peak.
    burst_at = min(total // 2, total - peak)
    burst_done = False
    # Outside the burst the live count stays below this.
    cap = max(resident + 1, resident + (peak - resident) * 2 // 3)
    max_linger = (cap - resident) // 2

    def alloc(prefix: str) -> str:
        nonlocal made
        ident = f"{prefix}{made}"
        size = rng.choice(SERVER_SIZES)
        made += 1
        live[ident] = size
        lines.append(f"A {ident} {size}")
        lines.extend(_checks(rng, ident, size, rng.randint(1, 4)))
        return ident

    def free(ident: str) -> None:
        lines.extend(_checks(rng, ident, live[ident], rng.randint(0, 2)))
        del live[ident]
        lines.append(f"F {ident}")

    for _ in range(resident):
        alloc("cfg")
    while made < total:
        if made >= burst_at and not burst_done:
            # Burst of simultaneous connections up to the peak, then drain.
            while len(live) < peak and made < total:
                transient.append(alloc("conn"))
            rng.shuffle(transient)
            while transient:
                free(transient.pop())
            burst_done = True
            continue
        room = cap - len(live)
        if room <= 0:
            free(transient.pop(rng.randrange(len(transient))))
            continue
        # An ordinary request: a few buffers.
        want = min(rng.randint(2, 14), total - made, room)
        request = [alloc("req") for _ in range(want)]
        # Some connections linger across requests.
        for ident in request:
            if rng.random() < 0.3:
                transient.append(ident)
            else:
                free(ident)
        while len(transient) > max_linger or (transient and rng.random() < 0.2):
            free(transient.pop(rng.randrange(len(transient))))
    for ident in list(live):
        free(ident)
    return "\n".join(lines) + "\n"
