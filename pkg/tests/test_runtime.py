import threading

import pytest
from hypothesis import given, settings, strategies as st

from meshheap.runtime import (
    ALL_ONES,
    MeshRuntime,
    MeshViolation,
    ViolationKind as K,
    classify_violation,
)
from meshheap.sim_memory import AddressSpace
from meshheap.tagged_ptr import TagConfig, ptr_add, split, strip

T4 = TagConfig(4)


def kind(v):
    return None if v is None else v.kind


@pytest.fixture
def rt():
    return MeshRuntime()


def test_table_bytes():
    assert MeshRuntime(TagConfig(17)).stats.table_bytes == 2_097_152
    assert MeshRuntime(TagConfig(16)).stats.table_bytes == 1_048_576


def test_fresh_table_rejects_every_tag():
    rt = MeshRuntime(T4)
    assert all(rt.lower[i] == ALL_ONES and rt.upper[i] == ALL_ONES for i in range(16))
    for tag in range(1, 16):
        p = (tag << T4.address_bits) | 0x1000
        assert kind(rt.safety_check(p, 1)) is K.USE_AFTER_FREE


def test_first_allocations_take_top_rows(rt):
    p = rt.malloc(4)
    tag, addr = split(p, rt.cfg)
    assert tag == 0x1FFFF
    assert rt.row(tag) == (addr, addr + 4)
    assert addr == rt.space.safe_heap.base
    assert split(rt.malloc(4), rt.cfg)[0] == 0x1FFFE


def test_exhaustion_without_wrap():
    rt = MeshRuntime(T4)
    tags = [split(rt.malloc(8), T4)[0] for _ in range(15)]
    assert tags == list(range(15, 0, -1))
    with pytest.raises(MeshViolation) as e:
        rt.malloc(8)
    assert e.value.violation.kind is K.METADATA_EXHAUSTION
    # the failed attempt leaked no safe-heap block
    assert len(rt.safe_heap.live_blocks()) == 15


def test_malloc_returns_null_when_heap_full():
    rt = MeshRuntime(space=AddressSpace(safe_heap_size=4096))
    assert rt.malloc(8192) == 0
    assert rt.index == rt.cfg.max_tag  # no row consumed


def test_check_byte_precision(rt):
    p = rt.malloc(8)
    assert rt.safety_check(p, 8) is None
    assert rt.safety_check(ptr_add(p, 7), 1) is None
    assert kind(rt.safety_check(ptr_add(p, 8), 1)) is K.BUFFER_OVERFLOW
    assert kind(rt.safety_check(ptr_add(p, 4), 8)) is K.BUFFER_OVERFLOW
    assert kind(rt.safety_check(ptr_add(p, -1), 1)) is K.BUFFER_UNDERFLOW
    rt.free(p)
    assert kind(rt.safety_check(p, 1)) is K.USE_AFTER_FREE


def test_untagged_access_to_safe_heap(rt):
    assert kind(rt.safety_check(0x2000, 1)) is K.ILLEGAL_SAFE_HEAP_ACCESS
    assert kind(rt.safety_check(0, 8)) is K.ILLEGAL_SAFE_HEAP_ACCESS
    assert rt.safety_check(rt.space.normal_heap.base, 8) is None


def test_checks_counted(rt):
    p = rt.malloc(8)
    for _ in range(5):
        rt.safety_check(p, 1)
    assert rt.stats.checks_executed == 5


def test_temporal_check(rt):
    assert rt.temporal_check(0x1234) is None
    p = rt.malloc(4)
    assert rt.temporal_check(p) is None
    rt.free(p)
    assert kind(rt.temporal_check(p)) is K.USE_AFTER_FREE


def test_spatial_check_matches_combined_on_valid_rows(rt):
    p = rt.malloc(16)
    for off in range(-4, 24):
        for size in (1, 2, 4, 8):
            q = ptr_add(p, off)
            assert kind(rt.spatial_check(q, size)) == kind(rt.safety_check(q, size))
    for raw in (0, 0x2000, rt.space.normal_heap.base):
        assert kind(rt.spatial_check(raw, 4)) == kind(rt.safety_check(raw, 4))


def test_classify_violation():
    assert classify_violation(ALL_ONES, 0x1000) is K.USE_AFTER_FREE
    assert classify_violation(0x1010, 0x100F) is K.BUFFER_UNDERFLOW


def test_free_paths(rt):
    p = rt.malloc(4)
    rt.free(p)
    assert rt.row(split(p, rt.cfg)[0]) == (ALL_ONES, ALL_ONES)
    with pytest.raises(MeshViolation) as e:
        rt.free(p)
    assert e.value.violation.kind is K.DOUBLE_FREE
    with pytest.raises(MeshViolation) as e:
        rt.free(0x2000)
    assert e.value.violation.kind is K.ILLEGAL_SAFE_HEAP_FREE
    with pytest.raises(MeshViolation) as e:
        rt.free(0)
    assert e.value.violation.kind is K.ILLEGAL_SAFE_HEAP_FREE
    q = rt.nh_alloc(32)
    rt.free(q)
    assert rt.nh_alloc(32) == q


def test_calloc(rt):
    p = rt.malloc(8)
    rt.space.write_int(strip(p, rt.cfg), 8, 0x1122334455667788)
    rt.free(p)
    q = rt.calloc(4, 2)
    assert rt.space.read_int(strip(q, rt.cfg), 8) == 0
    assert rt.calloc(2**62, 8) == 0
    z = rt.calloc(1, 0)
    lo, hi = rt.row(split(z, rt.cfg)[0])
    assert lo == hi
    assert kind(rt.safety_check(z, 1)) is K.BUFFER_OVERFLOW


def test_realloc(rt):
    p = rt.realloc(0, 8)
    assert split(p, rt.cfg)[0] == 0x1FFFF
    rt.space.write_int(strip(p, rt.cfg), 4, 0xCAFEBABE)
    q = rt.realloc(p, 16)
    assert rt.space.read_int(strip(q, rt.cfg), 4) == 0xCAFEBABE
    assert kind(rt.safety_check(p, 1)) is K.USE_AFTER_FREE
    assert rt.safety_check(ptr_add(q, 15), 1) is None
    with pytest.raises(MeshViolation) as e:
        rt.realloc(p, 4)
    assert e.value.violation.kind is K.DOUBLE_FREE
    with pytest.raises(MeshViolation) as e:
        rt.realloc(0x2000, 4)
    assert e.value.violation.kind is K.ILLEGAL_SAFE_HEAP_FREE


def test_realloc_normal_heap_stays_untagged(rt):
    a = rt.nh_alloc(4)
    rt.space.write_int(a, 4, 77)
    b = rt.realloc(a, 64)
    assert split(b, rt.cfg)[0] == 0
    assert rt.space.read_int(b, 4) == 77


def test_realloc_failure_leaves_original():
    rt = MeshRuntime(space=AddressSpace(safe_heap_size=4096))
    p = rt.malloc(16)
    assert rt.realloc(p, 1 << 20) == 0
    assert rt.safety_check(p, 16) is None


def test_memalign(rt):
    rt.malloc(4)
    p = rt.memalign(64, 8)
    a = strip(p, rt.cfg)
    assert a % 64 == 0
    assert rt.row(split(p, rt.cfg)[0]) == (a, a + 8)
    assert rt.memalign(3, 8) == 0


def test_wraparound_reuses_freed_row():
    rt = MeshRuntime(T4, wrap=True)
    ptrs = {split(p, T4)[0]: p for p in (rt.malloc(8) for _ in range(15))}
    rt.free(ptrs[9])
    assert split(rt.malloc(8), T4)[0] == 9
    assert rt.stats.wraparound_reuses == 1


def test_wraparound_full_table_exhausts():
    rt = MeshRuntime(T4, wrap=True)
    for _ in range(15):
        rt.malloc(8)
    with pytest.raises(MeshViolation) as e:
        rt.malloc(8)
    assert e.value.violation.kind is K.METADATA_EXHAUSTION


def test_wraparound_many_cycles():
    rt = MeshRuntime(T4, wrap=True)
    live = []
    for _ in range(10_000):
        if len(live) == 15:
            rt.free(live.pop(0))
        live.append(rt.malloc(8))
    assert rt.stats.total_allocations == 10_000
    # the first 15 allocations use fresh rows, every later one a reused row
    assert rt.stats.wraparound_reuses == 10_000 - 15


def test_wraparound_dangling_pointer_escapes_when_bounds_overlap():
    rt = MeshRuntime(T4, wrap=True)
    ptrs = [rt.malloc(8) for _ in range(15)]
    stale = ptrs[0]
    rt.free(stale)
    fresh = rt.malloc(8)
    assert split(fresh, T4)[0] == split(stale, T4)[0]
    # same block reused -> the stale pointer now passes
    assert fresh == stale
    assert rt.safety_check(stale, 8) is None


def test_stats_peak_and_live(rt):
    ps = [rt.malloc(8) for _ in range(5)]
    for p in ps[:3]:
        rt.free(p)
    rt.malloc(8)
    s = rt.snapshot()
    assert (s.total_allocations, s.peak_live_objects, s.current_live) == (6, 5, 3)
    assert s.table_bytes == 16 << 17


def test_concurrent_allocations_unique_tags():
    rt = MeshRuntime()
    out = [[] for _ in range(8)]

    def worker(i):
        for _ in range(500):
            out[i].append(split(rt.malloc(16), rt.cfg)[0])

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    tags = [t for ts in out for t in ts]
    assert len(set(tags)) == 4000 and 0 not in tags


def test_concurrent_alloc_free_with_wrap():
    rt = MeshRuntime(TagConfig(8), wrap=True)
    errors = []

    def worker():
        try:
            for _ in range(2000):
                p = rt.malloc(16)
                assert rt.safety_check(p, 16) is None
                rt.free(p)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert rt.stats.current_live == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 64)), min_size=1, max_size=60))
def test_tags_strictly_decreasing_without_wrap(ops):
    rt = MeshRuntime()
    live, tags = [], []
    for do_free, size in ops:
        if do_free and live:
            rt.free(live.pop())
        else:
            p = rt.malloc(size)
            live.append(p)
            tags.append(split(p, rt.cfg)[0])
        assert rt.stats.table_bytes == 16 << 17
    assert tags == sorted(tags, reverse=True)
    assert len(set(tags)) == len(tags) and 0 not in tags
