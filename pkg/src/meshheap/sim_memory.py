"""Simulated 64-bit address space.

Four disjoint regions with the safe heap at the lowest address, so that a
single ``<=`` comparison decides whether an untagged address may touch it.
Backing storage is sparse: pages materialize on first write and read as
zeros before that.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

PAGE_SIZE = 4096

SAFE_HEAP_BASE = 0x1000
GLOBALS_BASE = 0x1_0000_0000
NORMAL_HEAP_BASE = 0x0100_0000_0000
STACK_TOP = 0x7FFF_FFFF_F000

DEFAULT_SAFE_HEAP_SIZE = 16 << 20
DEFAULT_GLOBALS_SIZE = 1 << 20
DEFAULT_NORMAL_HEAP_SIZE = 16 << 20
DEFAULT_STACK_SIZE = 1 << 20


class MemoryFault(Exception):
    """Access outside every mapped region (a simulated hardware fault)."""

    def __init__(self, address: int, size: int, message: str = "unmapped access"):
        super().__init__(f"{message} at {address:#x} (+{size})")
        self.address = address
        self.size = size


class RegionKind(enum.Enum):
    SAFE_HEAP = "SafeHeap"
    GLOBALS = "Globals"
    NORMAL_HEAP = "NormalHeap"
    STACK = "Stack"


@dataclass
class Region:
    kind: RegionKind
    base: int
    size: int
    pages: dict[int, bytearray] = field(default_factory=dict, repr=False)

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, address: int, n: int = 1) -> bool:
        return self.base <= address and address + n <= self.end

    def read(self, address: int, n: int) -> bytes:
        out = bytearray()
        off = address - self.base
        while n:
            page, start = divmod(off, PAGE_SIZE)
            take = min(n, PAGE_SIZE - start)
            buf = self.pages.get(page)
            out += buf[start:start + take] if buf is not None else bytes(take)
            off += take
            n -= take
        return bytes(out)

    def write(self, address: int, data: bytes) -> None:
        off = address - self.base
        pos = 0
        while pos < len(data):
            page, start = divmod(off, PAGE_SIZE)
            take = min(len(data) - pos, PAGE_SIZE - start)
            buf = self.pages.get(page)
            if buf is None:
                buf = self.pages[page] = bytearray(PAGE_SIZE)
            buf[start:start + take] = data[pos:pos + take]
            off += take
            pos += take


class AddressSpace:
    def __init__(
        self,
        safe_heap_size: int = DEFAULT_SAFE_HEAP_SIZE,
        globals_size: int = DEFAULT_GLOBALS_SIZE,
        normal_heap_size: int = DEFAULT_NORMAL_HEAP_SIZE,
        stack_size: int = DEFAULT_STACK_SIZE,
    ):
        if safe_heap_size <= 0 or SAFE_HEAP_BASE + safe_heap_size >= GLOBALS_BASE:
            raise ValueError(f"safe heap size {safe_heap_size} does not fit below the globals region")
        self.safe_heap = Region(RegionKind.SAFE_HEAP, SAFE_HEAP_BASE, safe_heap_size)
        self.globals = Region(RegionKind.GLOBALS, GLOBALS_BASE, globals_size)
        self.normal_heap = Region(RegionKind.NORMAL_HEAP, NORMAL_HEAP_BASE, normal_heap_size)
        self.stack = Region(RegionKind.STACK, STACK_TOP - stack_size, stack_size)
        self.regions = (self.safe_heap, self.globals, self.normal_heap, self.stack)

    @property
    def safe_heap_upper(self) -> int:
        return self.safe_heap.end

    def in_safe_heap(self, address: int) -> bool:
        # One comparison: everything at or below the upper bound counts,
        # including the never-mapped zero page.
        return address <= self.safe_heap.end

    def region_of(self, address: int, n: int = 1) -> Region | None:
        for region in self.regions:
            if region.contains(address, max(n, 1)):
                return region
        return None

    def _region_for(self, address: int, n: int) -> Region:
        region = self.region_of(address, n)
        if region is None:
            raise MemoryFault(address, n)
        return region

    def read_bytes(self, address: int, n: int) -> bytes:
        if n == 0:
            return b""
        return self._region_for(address, n).read(address, n)

    def write_bytes(self, address: int, data: bytes) -> None:
        if not data:
            return
        self._region_for(address, len(data)).write(address, data)

    def read_int(self, address: int, width: int) -> int:
        return int.from_bytes(self.read_bytes(address, width), "little")

    def write_int(self, address: int, width: int, value: int) -> None:
        self.write_bytes(address, (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))

    def fill(self, address: int, n: int, byte: int = 0) -> None:
        if n:
            self.write_bytes(address, bytes([byte]) * n)
