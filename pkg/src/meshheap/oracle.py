"""Brute-force memory-safety oracle.

The oracle never looks at the metadata table. It keeps its own registry of
objects and a per-byte ownership map, and judges an access from the
provenance carried alongside the pointer value. Verdicts are compared with
the runtime's; disagreements are sorted into documented imprecision
(table-row reuse after wrap-around, carries into the tag bits) and real
failures.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import NamedTuple

from .runtime import MeshRuntime, MeshViolation, ViolationKind as K
from .sim_memory import AddressSpace, RegionKind
from .tagged_ptr import TagConfig, ptr_add


@dataclass
class ShadowObject:
    id: int
    base: int
    size: int
    region: RegionKind
    tag: int = 0
    live: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size


class ShadowMap:
    def __init__(self, space: AddressSpace):
        self.space = space
        self.objects: dict[int, ShadowObject] = {}
        self.owner: dict[int, int] = {}
        self._next_id = 1

    def allocate(self, base: int, size: int, tag: int = 0) -> ShadowObject:
        region = self.space.region_of(base)
        if region is None:
            raise ValueError(f"object at unmapped address {base:#x}")
        obj = ShadowObject(self._next_id, base, size, region.kind, tag)
        self._next_id += 1
        for a in range(base, base + size):
            if a in self.owner:
                raise AssertionError(f"byte {a:#x} already owned by object {self.owner[a]}")
            self.owner[a] = obj.id
        self.objects[obj.id] = obj
        return obj

    def release(self, obj_id: int) -> None:
        obj = self.objects[obj_id]
        if not obj.live:
            raise AssertionError(f"object {obj_id} released twice")
        obj.live = False
        for a in range(obj.base, obj.end):
            del self.owner[a]

    def live_objects(self) -> list[ShadowObject]:
        return [o for o in self.objects.values() if o.live]

    def in_safe_heap(self, address: int, size: int) -> bool:
        sh = self.space.safe_heap
        return address < sh.end and address + max(size, 1) > sh.base

    def check(self, prov: int | None, address: int, size: int) -> K | None:
        """Verdict for a ``size``-byte access at ``address`` through a value of provenance ``prov``."""
        if prov is None:
            return K.ILLEGAL_SAFE_HEAP_ACCESS if self.in_safe_heap(address, size) else None
        obj = self.objects[prov]
        if not obj.live:
            return K.USE_AFTER_FREE
        if address < obj.base:
            return K.BUFFER_UNDERFLOW
        if address + size > obj.end:
            return K.BUFFER_OVERFLOW
        return None

    def check_free(self, prov: int | None, address: int) -> K | None:
        if prov is None:
            return K.ILLEGAL_SAFE_HEAP_FREE if self.in_safe_heap(address, 1) else None
        if not self.objects[prov].live:
            return K.DOUBLE_FREE
        return None


@dataclass
class AccessRecord:
    op: str
    mesh: K | None
    oracle: K | None
    pointer: int
    address: int
    size: int
    prov: int | None = None
    prov_tag: int | None = None
    prov_region: RegionKind | None = None
    tag: int = 0
    row_owner: int | None = None
    row_owner_bounds: tuple[int, int] | None = None
    function: str = ""
    site: int = -1

    @property
    def agrees(self) -> bool:
        return self.mesh == self.oracle


EXPECTED = "expected-imprecision"
UNEXPECTED = "unexpected"
UNPROTECTED = "unprotected"


def classify_disagreement(rec: AccessRecord) -> str:
    if rec.prov is not None and rec.prov_region is not RegionKind.SAFE_HEAP:
        # Normal-heap, stack and global objects are outside the protected heap.
        return UNPROTECTED
    if rec.prov is not None and rec.tag != rec.prov_tag:
        # Arithmetic carried into the tag bits and now names another row.
        return EXPECTED
    if (
        rec.mesh is None
        and rec.prov is not None
        and rec.row_owner is not None
        and rec.row_owner != rec.prov
        and rec.row_owner_bounds is not None
        and rec.row_owner_bounds[0] <= rec.address
        and rec.address + rec.size <= rec.row_owner_bounds[1]
    ):
        # The stale tag's row was handed to a new object covering the address.
        return EXPECTED
    if (
        rec.mesh is not None
        and rec.oracle is not None
        and rec.row_owner is not None
        and rec.row_owner != rec.prov
    ):
        # Both reject the access, but the reused row describes a different object.
        return EXPECTED
    return UNEXPECTED


@dataclass
class AgreementSummary:
    total: int = 0
    agree: int = 0
    expected_imprecision: int = 0
    unprotected: int = 0
    unexpected: int = 0
    disagreements: list[tuple[str, AccessRecord]] = field(default_factory=list)

    @property
    def agreement_percent(self) -> float:
        return 100.0 * self.agree / self.total if self.total else 100.0

    @property
    def ok(self) -> bool:
        return self.unexpected == 0


def compare_reports(records: list[AccessRecord]) -> AgreementSummary:
    summary = AgreementSummary(total=len(records))
    for rec in records:
        if rec.agrees:
            summary.agree += 1
            continue
        cls = classify_disagreement(rec)
        if cls == EXPECTED:
            summary.expected_imprecision += 1
        elif cls == UNPROTECTED:
            summary.unprotected += 1
        else:
            summary.unexpected += 1
        summary.disagreements.append((cls, rec))
    return summary


# -- direct runtime traces -----------------------------------------------------


class Value(NamedTuple):
    raw: int
    prov: int | None


class TraceHarness:
    """Drive the runtime and the shadow map side by side, access by access."""

    def __init__(self, cfg: TagConfig = TagConfig(), wrap: bool = False, safe_heap_size: int = 1 << 20):
        self.cfg = cfg
        self.space = AddressSpace(safe_heap_size=safe_heap_size)
        self.rt = MeshRuntime(cfg, wrap, self.space)
        self.shadow = ShadowMap(self.space)
        self.row_owner: dict[int, int] = {}
        self.records: list[AccessRecord] = []

    def _record(self, op: str, mesh: K | None, oracle: K | None, v: Value, size: int) -> AccessRecord:
        tag, address = v.raw >> self.cfg.address_bits, v.raw & self.cfg.address_mask
        obj = self.shadow.objects.get(v.prov) if v.prov is not None else None
        owner = self.row_owner.get(tag) if tag else None
        owner_obj = self.shadow.objects.get(owner) if owner is not None else None
        rec = AccessRecord(
            op, mesh, oracle, v.raw, address, size, v.prov,
            obj.tag if obj else None, obj.region if obj else None, tag, owner,
            (owner_obj.base, owner_obj.end) if owner_obj and owner_obj.live else None,
        )
        self.records.append(rec)
        return rec

    def alloc(self, size: int) -> Value:
        p = self.rt.malloc(size)
        if p == 0:
            raise MemoryError("safe heap exhausted during trace")
        tag = p >> self.cfg.address_bits
        obj = self.shadow.allocate(p & self.cfg.address_mask, size, tag)
        self.row_owner[tag] = obj.id
        return Value(p, obj.id)

    def free(self, v: Value) -> AccessRecord:
        address = v.raw & self.cfg.address_mask
        oracle = self.shadow.check_free(v.prov, address)
        tag = v.raw >> self.cfg.address_bits
        owner = self.row_owner.get(tag) if tag else None
        try:
            self.rt.free(v.raw)
            mesh = None
        except MeshViolation as e:
            mesh = e.violation.kind
        rec = self._record("free", mesh, oracle, v, 0)
        if mesh is None and owner is not None:
            # The runtime released whatever object holds the row now.
            self.shadow.release(owner)
        return rec

    def derive(self, v: Value, offset: int) -> Value:
        return Value(ptr_add(v.raw, offset), v.prov)

    def access(self, v: Value, size: int) -> AccessRecord:
        mesh = self.rt.safety_check(v.raw, size)
        oracle = self.shadow.check(v.prov, v.raw & self.cfg.address_mask, size)
        return self._record("check", mesh.kind if mesh else None, oracle, v, size)

    def summary(self) -> AgreementSummary:
        return compare_reports(self.records)


def random_trace(rng: random.Random, n_ops: int = 200, cfg: TagConfig = TagConfig()) -> TraceHarness:
    """Run one randomized alloc/free/derive/access trace with wrap-around off.

    Offsets stay small relative to the address field so no derivation
    carries into the tag bits.
    """
    h = TraceHarness(cfg)
    values: list[Value] = []
    live: list[Value] = []
    sh = h.space.safe_heap
    for _ in range(n_ops):
        r = rng.random()
        if r < 0.25 or not values:
            v = h.alloc(rng.choice([0, 1, 3, 4, 8, 16, 24, 33, 64]))
            values.append(v)
            live.append(v)
        elif r < 0.38:
            if live and rng.random() < 0.85:
                v = live.pop(rng.randrange(len(live)))
            else:
                # Stale, derived or untagged safe-heap values; never untagged normal-heap ones.
                v = rng.choice([x for x in values if x.prov is not None or x.raw < sh.end])
                live = [x for x in live if x.prov is None or x.prov != v.prov]
            h.free(v)
        elif r < 0.55:
            base = rng.choice(values)
            size = h.shadow.objects[base.prov].size if base.prov else 16
            values.append(h.derive(base, rng.randint(-24, size + 24)))
        elif r < 0.6:
            # Untagged values with no provenance: inside the safe heap or far above it.
            addr = rng.choice([rng.randrange(sh.base, sh.end), h.space.normal_heap.base + rng.randrange(4096)])
            values.append(Value(addr, None))
        else:
            h.access(rng.choice(values), rng.choice([1, 2, 4, 8]))
    return h
