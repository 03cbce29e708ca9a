import pytest
from hypothesis import given, strategies as st

from meshheap.sim_memory import (
    GLOBALS_BASE,
    NORMAL_HEAP_BASE,
    SAFE_HEAP_BASE,
    AddressSpace,
    MemoryFault,
)


@pytest.fixture
def space():
    return AddressSpace()


def test_layout_is_ordered_and_disjoint(space):
    regions = space.regions
    assert [r.base for r in regions] == sorted(r.base for r in regions)
    for a, b in zip(regions, regions[1:]):
        assert a.end <= b.base
    assert space.safe_heap.base == SAFE_HEAP_BASE
    assert all(r.end <= 1 << 47 for r in regions)


def test_roundtrip_globals(space):
    space.write_bytes(GLOBALS_BASE, b"\x01\x02\x03\x04\x05\x06\x07\x08")
    assert space.read_bytes(GLOBALS_BASE, 8) == b"\x01\x02\x03\x04\x05\x06\x07\x08"


def test_roundtrip_normal_heap(space):
    space.write_int(NORMAL_HEAP_BASE + 100, 4, 0xDEADBEEF)
    assert space.read_int(NORMAL_HEAP_BASE + 100, 4) == 0xDEADBEEF


def test_unwritten_memory_reads_zero(space):
    assert space.read_bytes(NORMAL_HEAP_BASE + 5000, 16) == bytes(16)


def test_page_zero_unmapped(space):
    with pytest.raises(MemoryFault):
        space.read_bytes(0, 1)
    with pytest.raises(MemoryFault):
        space.write_bytes(8, b"x")


def test_access_spanning_region_end_faults(space):
    end = space.globals.end
    with pytest.raises(MemoryFault):
        space.read_bytes(end - 4, 8)


def test_zero_length_write_is_noop(space):
    space.write_bytes(0, b"")
    assert space.read_bytes(0, 0) == b""


def test_write_across_page_boundary(space):
    a = NORMAL_HEAP_BASE + 4096 - 3
    space.write_bytes(a, b"abcdefgh")
    assert space.read_bytes(a, 8) == b"abcdefgh"


def test_in_safe_heap_examples(space):
    assert space.in_safe_heap(space.safe_heap.base)
    assert not space.in_safe_heap(space.safe_heap_upper + 1)
    assert space.in_safe_heap(0)


@given(st.integers(0, 1 << 48))
def test_in_safe_heap_is_single_comparison(a):
    space = AddressSpace(safe_heap_size=1 << 16)
    assert space.in_safe_heap(a) == (a <= space.safe_heap_upper)


@given(st.integers(0, 1 << 47))
def test_no_address_in_two_regions(a):
    space = AddressSpace(safe_heap_size=1 << 16)
    assert sum(r.contains(a) for r in space.regions) <= 1
