"""Simulated trusted/untrusted memory split.

Two disjoint byte arenas model enclave memory and ordinary host memory.
Handles are plain (base, length) offsets into a single flat address space;
nothing is hardware-protected, but every crossing-related safety check the
real system performs is enforced here as a logical invariant:

  * ``check_memory(region)`` accepts a region iff it lies entirely inside
    the untrusted arena, so a buffer crafted to overlap trusted space is
    rejected before it is ever read.
  * ``crossing()`` records every boundary transition (and can apply a
    configurable delay) so harnesses can account for transition cost.

Code paths acting for the untrusted side must use :meth:`MemoryEnv.store`
/ :meth:`MemoryEnv.load`, which assert untrusted membership.
"""

from __future__ import annotations

import time
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .errors import CapacityExhausted, MemoryViolation

DEFAULT_TRUSTED_CAPACITY = 128 * 1024 * 1024  # mirrors the protected-memory limit
DEFAULT_UNTRUSTED_CAPACITY = 1024 * 1024 * 1024


class ArenaKind(Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


class Region(NamedTuple):
    """Offset-based handle to a byte range in the flat address space."""

    base: int
    length: int

    @property
    def end(self) -> int:
        return self.base + self.length


class Arena:
    """One byte pool: a contiguous address range plus usage accounting.

    Allocation is a bump pointer over the address range; backing storage
    is created lazily per allocation so a 128 MB trusted arena costs
    nothing until used. Allocations never straddle arenas because each
    arena owns a disjoint address range.
    """

    def __init__(self, kind: ArenaKind, base: int, capacity: int):
        self.kind = kind
        self.base = base
        self.capacity = capacity
        self.used = 0
        # parallel arrays for bisect: chunk start offsets and buffers
        self._starts: list[int] = []
        self._bufs: list[bytearray] = []

    @property
    def end(self) -> int:
        return self.base + self.capacity

    def alloc(self, size: int) -> Region:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        if self.used + size > self.capacity:
            raise CapacityExhausted(
                f"{self.kind.value} arena exhausted: "
                f"{self.used} used + {size} requested > {self.capacity}"
            )
        base = self.base + self.used
        self.used += size
        self._starts.append(base)
        self._bufs.append(bytearray(size))
        return Region(base, size)

    def contains(self, region: Region) -> bool:
        return self.base <= region.base and region.end <= self.end

    def view(self, region: Region) -> memoryview:
        """Writable view of an allocated region (may be a sub-range of a chunk)."""
        i = bisect_right(self._starts, region.base) - 1
        if i < 0:
            raise MemoryViolation(f"no allocation backing {region}")
        start = self._starts[i]
        buf = self._bufs[i]
        off = region.base - start
        if off + region.length > len(buf):
            raise MemoryViolation(f"{region} exceeds its backing allocation")
        return memoryview(buf)[off : off + region.length]


@dataclass
class CrossingStats:
    """Counters over boundary transitions; all monotonically non-decreasing."""

    ocall_count: int = 0
    bytes_in: int = 0
    bytes_out: int = 0


@dataclass
class BoundaryConfig:
    trusted_capacity_bytes: int = DEFAULT_TRUSTED_CAPACITY
    untrusted_capacity_bytes: int = DEFAULT_UNTRUSTED_CAPACITY
    crossing_delay_ns: int = 0


class MemoryEnv:
    """The two arenas plus crossing instrumentation.

    Trusted occupies [0, trusted_capacity); untrusted starts right after,
    so the ranges are disjoint by construction. ``check_memory`` is
    read-only and callable from any thread; allocation is serialized by
    the caller (single logical allocator).
    """

    def __init__(self, config: BoundaryConfig | None = None):
        self.config = config or BoundaryConfig()
        self.trusted = Arena(ArenaKind.TRUSTED, 0, self.config.trusted_capacity_bytes)
        self.untrusted = Arena(
            ArenaKind.UNTRUSTED,
            self.config.trusted_capacity_bytes,
            self.config.untrusted_capacity_bytes,
        )
        self.stats = CrossingStats()
        # cached bounds for the hot-path check
        self._u_base = self.untrusted.base
        self._u_end = self.untrusted.end

    def alloc(self, kind: ArenaKind, size: int) -> Region:
        arena = self.trusted if kind is ArenaKind.TRUSTED else self.untrusted
        return arena.alloc(size)

    def check_memory(self, region: Region) -> None:
        """Raise ``MemoryViolation`` unless region lies entirely untrusted."""
        if not (self._u_base <= region.base and region.base + region.length <= self._u_end):
            raise MemoryViolation(
                f"region [{region.base}, {region.end}) not entirely outside trusted space"
            )

    def is_untrusted(self, region: Region) -> bool:
        return self._u_base <= region.base and region.base + region.length <= self._u_end

    def view(self, region: Region) -> memoryview:
        """Writable view of an allocated region, in either arena."""
        arena = self.untrusted if self.is_untrusted(region) else self.trusted
        return arena.view(region)

    def store(self, region: Region, data: bytes) -> None:
        """Untrusted-side write; asserts the target is untrusted memory."""
        assert self.is_untrusted(region), "untrusted-side code wrote trusted memory"
        view = self.untrusted.view(region)
        view[: len(data)] = data

    def load(self, region: Region) -> bytes:
        """Untrusted-side read; asserts the source is untrusted memory."""
        assert self.is_untrusted(region), "untrusted-side code read trusted memory"
        return bytes(self.untrusted.view(region))

    def crossing(self, inward: bool, payload_size: int) -> None:
        """Account one boundary transition; optionally model its cost."""
        self.stats.ocall_count += 1
        if inward:
            self.stats.bytes_in += payload_size
        else:
            self.stats.bytes_out += payload_size
        delay = self.config.crossing_delay_ns
        if delay:
            time.sleep(delay / 1e9)
