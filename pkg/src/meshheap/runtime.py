"""MESH runtime: metadata table, allocation wrappers and safety checks.

The table has one ``(lower, upper)`` row per tag value. A row whose lower
bound is all-ones is invalid; row 0 stays invalid forever because tag 0
means "untagged". Checks return ``None`` on success and a ``Violation``
otherwise; allocation and free raise ``MeshViolation``.
"""

from __future__ import annotations

import enum
import threading
from array import array
from dataclasses import asdict, dataclass

from .allocator import AllocatorError, FreeListAllocator, is_power_of_two
from .sim_memory import AddressSpace, MemoryFault
from .tagged_ptr import DEFAULT_CONFIG, MASK64, TagConfig

ALL_ONES = MASK64
ROW_BYTES = 16


class ViolationKind(enum.Enum):
    USE_AFTER_FREE = "UseAfterFree"
    BUFFER_OVERFLOW = "BufferOverflow"
    BUFFER_UNDERFLOW = "BufferUnderflow"
    ILLEGAL_SAFE_HEAP_ACCESS = "IllegalSafeHeapAccess"
    ILLEGAL_SAFE_HEAP_FREE = "IllegalSafeHeapFree"
    DOUBLE_FREE = "DoubleFree"
    METADATA_EXHAUSTION = "MetadataExhaustion"

    def __str__(self) -> str:
        return self.value


MESSAGES = {
    ViolationKind.USE_AFTER_FREE: "use-after-free detected",
    ViolationKind.BUFFER_OVERFLOW: "Buffer overflow detected",
    ViolationKind.BUFFER_UNDERFLOW: "Buffer underflow detected",
    ViolationKind.ILLEGAL_SAFE_HEAP_ACCESS: "Illegal access to safe heap detected",
    ViolationKind.ILLEGAL_SAFE_HEAP_FREE: "Illegal free in safe heap detected",
    ViolationKind.DOUBLE_FREE: "double-free detected",
    ViolationKind.METADATA_EXHAUSTION: "Metadata exhaustion",
}


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    pointer: int
    tag: int
    address: int
    size: int = 0
    lower: int = ALL_ONES
    upper: int = ALL_ONES

    @property
    def message(self) -> str:
        return MESSAGES[self.kind]


class MeshViolation(Exception):
    def __init__(self, violation: Violation):
        super().__init__(f"{violation.message} (pointer {violation.pointer:#x})")
        self.violation = violation


@dataclass
class RuntimeStats:
    total_allocations: int = 0
    peak_live_objects: int = 0
    current_live: int = 0
    checks_executed: int = 0
    table_bytes: int = 0
    wraparound_reuses: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def classify_violation(lower: int, address: int) -> ViolationKind:
    """Tell a failed lower-bound comparison apart: freed row or underflow."""
    assert address < lower
    return ViolationKind.USE_AFTER_FREE if lower == ALL_ONES else ViolationKind.BUFFER_UNDERFLOW


class MeshRuntime:
    def __init__(
        self,
        cfg: TagConfig = DEFAULT_CONFIG,
        wrap: bool = False,
        space: AddressSpace | None = None,
    ):
        self.cfg = cfg
        self.wrap = wrap
        self.space = space if space is not None else AddressSpace()
        rows = cfg.table_rows
        self.lower = array("Q", [ALL_ONES]) * rows
        self.upper = array("Q", [ALL_ONES]) * rows
        self.index = rows - 1
        self._cursor = self.index
        self.safe_heap = FreeListAllocator(self.space.safe_heap.base, self.space.safe_heap.size)
        self.normal_heap = FreeListAllocator(self.space.normal_heap.base, self.space.normal_heap.size)
        self.stats = RuntimeStats(table_bytes=ROW_BYTES * rows)
        self.lock = threading.RLock()
        # Cached for the hot path.
        self._shift = cfg.address_bits
        self._amask = cfg.address_mask
        self._sh_upper = self.space.safe_heap_upper

    # -- table -------------------------------------------------------------

    def row(self, tag: int) -> tuple[int, int]:
        return self.lower[tag], self.upper[tag]

    def row_valid(self, tag: int) -> bool:
        return self.lower[tag] != ALL_ONES

    def _violation(self, kind: ViolationKind, p: int, size: int = 0) -> Violation:
        tag, address = p >> self._shift, p & self._amask
        lo, hi = (self.lower[tag], self.upper[tag]) if tag else (ALL_ONES, ALL_ONES)
        return Violation(kind, p, tag, address, size, lo, hi)

    def wraparound_find_free(self) -> int:
        """Find an invalid row by cyclic downward scan from the last claim."""
        n = self.cfg.max_tag
        start = self._cursor
        lower = self.lower
        for k in range(1, n + 1):
            i = (start - 1 - k) % n + 1
            if lower[i] == ALL_ONES:
                return i
        raise MeshViolation(Violation(ViolationKind.METADATA_EXHAUSTION, 0, 0, 0))

    def _next_row(self) -> tuple[int, bool]:
        """Pick the row for the next allocation without claiming it."""
        if self.index > 0:
            return self.index, False
        if not self.wrap:
            raise MeshViolation(Violation(ViolationKind.METADATA_EXHAUSTION, 0, 0, 0))
        return self.wraparound_find_free(), True

    # -- allocation --------------------------------------------------------

    def malloc(self, size: int, align: int | None = None) -> int:
        """Allocate a protected object; return its tagged pointer or 0."""
        with self.lock:
            # Row availability first, so exhaustion never leaks a block.
            tag, reused = self._next_row()
            address = self.safe_heap.alloc(size, align)
            if address is None:
                return 0
            if reused:
                self.stats.wraparound_reuses += 1
            else:
                self.index -= 1
            self._cursor = tag
            self.lower[tag] = address
            self.upper[tag] = address + size
            st = self.stats
            st.total_allocations += 1
            st.current_live += 1
            if st.current_live > st.peak_live_objects:
                st.peak_live_objects = st.current_live
            return (tag << self._shift) | address

    def calloc(self, count: int, size: int) -> int:
        total = count * size
        if count < 0 or size < 0 or total > MASK64:
            return 0
        p = self.malloc(total)
        if p:
            self.space.fill(p & self._amask, total)
        return p

    def memalign(self, align: int, size: int) -> int:
        if not is_power_of_two(align):
            return 0
        return self.malloc(size, align)

    def realloc(self, p: int, new_size: int) -> int:
        p &= MASK64
        if p == 0:
            return self.malloc(new_size)
        tag, address = p >> self._shift, p & self._amask
        with self.lock:
            if tag == 0:
                if self.space.in_safe_heap(address):
                    raise MeshViolation(self._violation(ViolationKind.ILLEGAL_SAFE_HEAP_FREE, p))
                if not self.normal_heap.owns(address):
                    raise MemoryFault(address, 0, "realloc of unknown normal-heap block")
                old_size = self.normal_heap.block_size(address)
                fresh = self.normal_heap.alloc(new_size)
                if fresh is None:
                    return 0
                self.space.write_bytes(fresh, self.space.read_bytes(address, min(old_size, new_size)))
                self.normal_heap.free(address)
                return fresh
            if not self.row_valid(tag):
                raise MeshViolation(self._violation(ViolationKind.DOUBLE_FREE, p))
            lo, hi = self.row(tag)
            fresh = self.malloc(new_size)
            if fresh == 0:
                return 0
            keep = min(hi - lo, new_size)
            self.space.write_bytes(fresh & self._amask, self.space.read_bytes(lo, keep))
            self.free(p)
            return fresh

    def free(self, p: int) -> None:
        p &= MASK64
        tag, address = p >> self._shift, p & self._amask
        with self.lock:
            if tag == 0:
                if self.space.in_safe_heap(address):
                    raise MeshViolation(self._violation(ViolationKind.ILLEGAL_SAFE_HEAP_FREE, p))
                try:
                    self.normal_heap.free(address)
                except AllocatorError:
                    raise MemoryFault(address, 0, "free of unknown normal-heap block") from None
                return
            lo = self.lower[tag]
            if lo == ALL_ONES:
                raise MeshViolation(self._violation(ViolationKind.DOUBLE_FREE, p))
            self.lower[tag] = ALL_ONES
            self.upper[tag] = ALL_ONES
            # The row's base locates the block even for an interior pointer.
            self.safe_heap.free(lo)
            self.stats.current_live -= 1

    def nh_alloc(self, size: int) -> int:
        with self.lock:
            address = self.normal_heap.alloc(size)
        return address or 0

    def nh_free(self, address: int) -> None:
        with self.lock:
            try:
                self.normal_heap.free(address)
            except AllocatorError:
                raise MemoryFault(address, 0, "free of unknown normal-heap block") from None

    # -- checks ------------------------------------------------------------

    def safety_check(self, p: int, size: int) -> Violation | None:
        """Combined temporal and spatial check before a ``size``-byte access."""
        self.stats.checks_executed += 1
        tag = p >> self._shift
        address = p & self._amask
        if tag == 0:
            if address <= self._sh_upper:
                return self._violation(ViolationKind.ILLEGAL_SAFE_HEAP_ACCESS, p, size)
            return None
        lo = self.lower[tag]
        if address < lo:
            return self._violation(classify_violation(lo, address), p, size)
        if address + size > self.upper[tag]:
            return self._violation(ViolationKind.BUFFER_OVERFLOW, p, size)
        return None

    def temporal_check(self, p: int) -> Violation | None:
        tag = p >> self._shift
        if tag == 0:
            return None
        if self.lower[tag] == ALL_ONES:
            return self._violation(ViolationKind.USE_AFTER_FREE, p)
        return None

    def spatial_check(self, p: int, size: int) -> Violation | None:
        tag = p >> self._shift
        address = p & self._amask
        if tag == 0:
            if self.space.in_safe_heap(address):
                return self._violation(ViolationKind.ILLEGAL_SAFE_HEAP_ACCESS, p, size)
            return None
        if address < self.lower[tag]:
            return self._violation(ViolationKind.BUFFER_UNDERFLOW, p, size)
        if address + size > self.upper[tag]:
            return self._violation(ViolationKind.BUFFER_OVERFLOW, p, size)
        return None

    def snapshot(self) -> RuntimeStats:
        return RuntimeStats(**self.stats.as_dict())
