"""First-fit free-list allocator over one address range.

Block bookkeeping is kept out of band so a simulated overflow can never
corrupt allocator state. Reservations are rounded up to ``GRANULE`` bytes;
the requested size is remembered separately and is what callers see.
"""

from __future__ import annotations

import bisect

GRANULE = 16


class AllocatorError(Exception):
    """Allocator misuse that only a toolkit bug can trigger."""


def _align_up(value: int, align: int) -> int:
    return (value + align - 1) & ~(align - 1)


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class FreeListAllocator:
    def __init__(self, base: int, size: int, default_align: int = GRANULE):
        if not is_power_of_two(default_align):
            raise ValueError("alignment must be a power of two")
        self.base = base
        self.size = size
        self.default_align = default_align
        # Free chunks as parallel sorted lists of starts and ends.
        self._starts: list[int] = [base]
        self._ends: list[int] = [base + size]
        # address -> (reserved end, requested size)
        self._blocks: dict[int, tuple[int, int]] = {}

    @property
    def end(self) -> int:
        return self.base + self.size

    def alloc(self, size: int, align: int | None = None) -> int | None:
        """Reserve ``size`` bytes; return the block address or None."""
        if size < 0:
            raise ValueError("negative allocation size")
        align = self.default_align if align is None else align
        if not is_power_of_two(align):
            raise ValueError(f"alignment {align} is not a power of two")
        need = _align_up(max(size, 1), GRANULE)
        for i, (start, end) in enumerate(zip(self._starts, self._ends)):
            addr = _align_up(start, align)
            if addr + need > end:
                continue
            # Carve [addr, addr+need) out of chunk i.
            tail = addr + need
            if addr > start:
                self._ends[i] = addr
                if tail < end:
                    self._starts.insert(i + 1, tail)
                    self._ends.insert(i + 1, end)
            elif tail < end:
                self._starts[i] = tail
            else:
                del self._starts[i]
                del self._ends[i]
            self._blocks[addr] = (tail, size)
            return addr
        return None

    def free(self, address: int) -> None:
        block = self._blocks.pop(address, None)
        if block is None:
            raise AllocatorError(f"free of unknown block {address:#x}")
        start, end = address, block[0]
        i = bisect.bisect_left(self._starts, start)
        merge_left = i > 0 and self._ends[i - 1] == start
        merge_right = i < len(self._starts) and self._starts[i] == end
        if merge_left and merge_right:
            self._ends[i - 1] = self._ends[i]
            del self._starts[i]
            del self._ends[i]
        elif merge_left:
            self._ends[i - 1] = end
        elif merge_right:
            self._starts[i] = start
        else:
            self._starts.insert(i, start)
            self._ends.insert(i, end)

    def owns(self, address: int) -> bool:
        return address in self._blocks

    def block_size(self, address: int) -> int:
        """Requested size of the live block at ``address``."""
        try:
            return self._blocks[address][1]
        except KeyError:
            raise AllocatorError(f"unknown block {address:#x}") from None

    def free_chunks(self) -> list[tuple[int, int]]:
        """Free chunks as ``(start, size)`` pairs in address order."""
        return [(s, e - s) for s, e in zip(self._starts, self._ends)]

    def live_blocks(self) -> dict[int, tuple[int, int]]:
        """Live blocks as ``address -> (reserved bytes, requested size)``."""
        return {a: (end - a, size) for a, (end, size) in self._blocks.items()}
