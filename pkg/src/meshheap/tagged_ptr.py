"""Tagged 64-bit pointer words.

A pointer word carries a table index (the tag) in its top ``tag_bits`` bits
and an address in the remaining low bits. Tag 0 marks an unprotected pointer.
"""

from __future__ import annotations

from dataclasses import dataclass

MASK64 = (1 << 64) - 1

# A tagged pointer is just its raw machine word.
TaggedPointer = int


@dataclass(frozen=True)
class TagConfig:
    tag_bits: int = 17

    def __post_init__(self) -> None:
        if not 1 <= self.tag_bits <= 17:
            raise ValueError(f"tag_bits must be in [1, 17], got {self.tag_bits}")

    @property
    def address_bits(self) -> int:
        return 64 - self.tag_bits

    @property
    def address_mask(self) -> int:
        return (1 << self.address_bits) - 1

    @property
    def tag_mask(self) -> int:
        return MASK64 ^ self.address_mask

    @property
    def table_rows(self) -> int:
        return 1 << self.tag_bits

    @property
    def max_tag(self) -> int:
        return self.table_rows - 1


DEFAULT_CONFIG = TagConfig()


def split(p: int, cfg: TagConfig = DEFAULT_CONFIG) -> tuple[int, int]:
    """Return ``(tag, address)`` of a pointer word."""
    p &= MASK64
    return p >> cfg.address_bits, p & cfg.address_mask


def tag_of(p: int, cfg: TagConfig = DEFAULT_CONFIG) -> int:
    return (p & MASK64) >> cfg.address_bits


def strip(p: int, cfg: TagConfig = DEFAULT_CONFIG) -> int:
    return p & cfg.address_mask


def apply_tag(address: int, tag: int, cfg: TagConfig = DEFAULT_CONFIG) -> int:
    """Place ``tag`` in the tag field of ``address``.

    Raises ValueError if the address already has bits set in the tag field
    (it is outside the canonical range) or the tag does not fit.
    """
    if address < 0 or address & ~cfg.address_mask:
        raise ValueError(f"address {address:#x} is not canonical for {cfg.tag_bits} tag bits")
    if not 0 <= tag <= cfg.max_tag:
        raise ValueError(f"tag {tag:#x} does not fit in {cfg.tag_bits} bits")
    return (tag << cfg.address_bits) | address


def ptr_add(p: int, offset: int) -> int:
    """Pointer arithmetic on the full word, wrapping at 64 bits.

    No masking is applied: a carry out of the address field changes the tag.
    """
    return (p + offset) & MASK64


def to_signed(v: int) -> int:
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v
