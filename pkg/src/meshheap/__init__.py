"""Simulated memory-efficient safe heap with tagged pointers."""

from .runtime import MeshRuntime, MeshViolation, RuntimeStats, Violation, ViolationKind
from .sim_memory import AddressSpace, MemoryFault
from .tagged_ptr import TagConfig, apply_tag, ptr_add, split, strip

__all__ = [
    "AddressSpace",
    "MemoryFault",
    "MeshRuntime",
    "MeshViolation",
    "RuntimeStats",
    "TagConfig",
    "Violation",
    "ViolationKind",
    "apply_tag",
    "ptr_add",
    "split",
    "strip",
]

__version__ = "0.1.0"
