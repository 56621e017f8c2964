"""Flow-state management under a tight trusted-memory budget.

Three interlinked structures keep millions of flows trackable while only a
fixed working set of plaintext states ever lives in trusted memory:

  * ``flow cache`` — C fixed-size state slots in the trusted arena, linked
    into an LRU list.
  * ``flow store`` — sealed (AEAD ciphertext + 16-byte tag) state cells in
    the untrusted arena, recycled through a free list whose head/tail
    pointers stay on the trusted side.
  * two cuckoo lookup tables — a small one indexing only cached flows
    (searched first on every packet, so it stays cache-hot) and a large
    growable one indexing store-resident flows.

A lookup entry records the 13-byte flow id, a locator (trusted slot offset
or untrusted cell offset — which arena it points into tells you where the
state lives), a swap counter, and the last-access second. The swap counter
starts at a random 64-bit value and increments on every swap-out; it is
bound into both the AEAD nonce and the associated data together with the
flow id, so a stale or transplanted ciphertext can never be swapped back
in, and two seals of identical state never produce linkable ciphertexts.

A manager instance is single-threaded by design: one instance per receive
ring, no shared mutable state between instances. The state region returned
by ``track`` stays valid until the next track/terminate/expire call on the
same manager.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .boundary import ArenaKind, MemoryEnv, Region
from .errors import AuthFailure
from .packets import canonical_fid

U64 = 0xFFFFFFFFFFFFFFFF
_M104 = (1 << 104) - 1
HASH_BITS = 48

# modeled per-entry byte costs (8-byte references)
CACHE_ENTRY_OVERHEAD = 24  # two LRU links + back pointer
LKUP_ENTRY_BYTES = 33  # 13-byte fid + 8-byte locator + 8-byte counter + 4-byte seconds
MAC_LEN = 16


def make_hash_pair(seed: int) -> Callable[[bytes], tuple[int, int]]:
    """Two independent keyed 48-bit hashes of a 13-byte flow id.

    Multiply-shift over the little-endian integer of the fid with random
    odd 104-bit multipliers (matching the input width), keeping the top 48
    bits of the mod-2^104 product. Entropy lands in the high output bits,
    so consumers must derive bucket indices from the top (the tables use a
    fixed-point range map), never by masking the low bits.
    """
    rng = random.Random(seed)
    k1 = rng.getrandbits(104) | 1
    k2 = rng.getrandbits(104) | 1

    def hash_pair(fid: bytes) -> tuple[int, int]:
        x = int.from_bytes(fid, "little")
        return ((x * k1) & _M104) >> 56, ((x * k2) & _M104) >> 56

    return hash_pair


class LkupEntry:
    __slots__ = ("fid", "locator", "slot", "swap_count", "last_access", "h1", "h2")

    def __init__(self, fid: bytes, h1: int, h2: int, swap_count: int):
        self.fid = fid
        self.h1 = h1
        self.h2 = h2
        self.swap_count = swap_count
        self.locator = 0
        self.slot: CacheSlot | None = None
        self.last_access = 0


class NeedsResize(Exception):
    """Cuckoo insert exceeded its displacement bound; grow and retry."""


class CuckooTable:
    """Bucketized cuckoo hash table: two hash functions, four slots per bucket.

    Keys live in one of their two candidate buckets; inserts relocate via a
    bounded random-walk eviction chain. Entries cache their two hash values
    so displacement and resizing never rehash.
    """

    BUCKET = 4
    MAX_DISPLACEMENTS = 500

    __slots__ = ("nbuckets", "slots", "count", "_rng")

    def __init__(self, nbuckets: int, seed: int = 0):
        if nbuckets < 1 or nbuckets & (nbuckets - 1):
            raise ValueError("bucket count must be a power of two")
        self.nbuckets = nbuckets
        self.slots: list[LkupEntry | None] = [None] * (nbuckets * self.BUCKET)
        self.count = 0
        self._rng = random.Random(seed)

    @classmethod
    def for_capacity(cls, entries: int, seed: int = 0, load_factor: float = 0.93) -> "CuckooTable":
        nb = 1
        while nb * cls.BUCKET * load_factor < entries:
            nb <<= 1
        return cls(nb, seed)

    @property
    def load_factor(self) -> float:
        return self.count / (self.nbuckets * self.BUCKET)

    def bucket_of(self, h: int) -> int:
        # fixed-point range map: consumes the high (well-mixed) hash bits
        return (h * self.nbuckets) >> HASH_BITS

    def lookup(self, fid: bytes, h1: int, h2: int) -> LkupEntry | None:
        slots = self.slots
        nb = self.nbuckets
        b = ((h1 * nb) >> 48) * 4
        for s in (b, b + 1, b + 2, b + 3):
            e = slots[s]
            if e is not None and e.fid == fid:
                return e
        b = ((h2 * nb) >> 48) * 4
        for s in (b, b + 1, b + 2, b + 3):
            e = slots[s]
            if e is not None and e.fid == fid:
                return e
        return None

    def _place(self, entry: LkupEntry) -> bool:
        slots = self.slots
        nb = self.nbuckets
        for h in (entry.h1, entry.h2):
            b = ((h * nb) >> 48) * 4
            for s in (b, b + 1, b + 2, b + 3):
                if slots[s] is None:
                    slots[s] = entry
                    return True
        return False

    def insert(self, entry: LkupEntry) -> None:
        """Insert; raises ``NeedsResize`` after the displacement bound.

        On failure the table still holds the same multiset of entries plus
        ``entry`` minus the homeless one carried by the exception, so the
        caller can grow the table and re-insert ``exc.args[0]``.
        """
        if self._place(entry):
            self.count += 1
            return
        slots = self.slots
        nb = self.nbuckets
        rng = self._rng
        cur = entry
        for _ in range(self.MAX_DISPLACEMENTS):
            h = cur.h1 if rng.random() < 0.5 else cur.h2
            s = ((h * nb) >> 48) * 4 + rng.randrange(4)
            cur, slots[s] = slots[s], cur
            if self._place(cur):
                self.count += 1
                return
        raise NeedsResize(cur)

    def remove(self, fid: bytes, h1: int, h2: int) -> LkupEntry | None:
        slots = self.slots
        nb = self.nbuckets
        for h in (h1, h2):
            b = ((h * nb) >> 48) * 4
            for s in (b, b + 1, b + 2, b + 3):
                e = slots[s]
                if e is not None and e.fid == fid:
                    slots[s] = None
                    self.count -= 1
                    return e
        return None

    def entries(self) -> Iterator[LkupEntry]:
        for e in self.slots:
            if e is not None:
                yield e

    def grown(self) -> "CuckooTable":
        """Return a table of twice the buckets holding all current entries."""
        new = CuckooTable(self.nbuckets * 2, self._rng.getrandbits(32))
        for e in self.entries():
            new.insert(e)  # cannot practically fail at half load
        return new


class CacheSlot:
    __slots__ = ("index", "base", "view", "entry", "prev", "next")

    def __init__(self, index: int, base: int, view: memoryview):
        self.index = index
        self.base = base  # trusted-arena offset, used as the locator
        self.view = view
        self.entry: LkupEntry | None = None
        self.prev: CacheSlot | None = None
        self.next: CacheSlot | None = None


def seal_state(aead: AESGCM, iv4: bytes, fid: bytes, swap_count: int, state: bytes) -> bytes:
    """AEAD-seal one state: nonce = iv || counter, bound to fid || counter."""
    sc = swap_count.to_bytes(8, "big")
    return aead.encrypt(iv4 + sc, state, fid + sc)


def open_state(aead: AESGCM, iv4: bytes, fid: bytes, swap_count: int, sealed: bytes) -> bytes:
    sc = swap_count.to_bytes(8, "big")
    try:
        return aead.decrypt(iv4 + sc, sealed, fid + sc)
    except InvalidTag:
        raise AuthFailure(
            f"state for flow {fid.hex()} failed authentication at swap count {swap_count}"
        ) from None


@dataclass
class StateStats:
    tracks: int = 0
    hits: int = 0
    store_hits: int = 0
    new_flows: int = 0
    seals: int = 0
    opens: int = 0
    evictions: int = 0
    terminations: int = 0
    expirations: int = 0
    auth_failures: int = 0
    store_grows: int = 0
    resizes: int = 0

    @property
    def misses(self) -> int:
        return self.tracks - self.hits

    @property
    def miss_rate(self) -> float:
        return self.misses / self.tracks if self.tracks else 0.0


def footprint_bytes(cache_entries: int, tracked_flows: int, ref_bytes: int = 8) -> dict[str, int]:
    """Trusted-memory metadata accounting (state bytes excluded).

    Per cached flow: three references of ``ref_bytes``. Per tracked flow:
    13-byte fid + one reference + 8-byte counter + 4-byte seconds, assuming
    full utilization of the lookup structure.
    """
    cache_meta = cache_entries * 3 * ref_bytes
    lkup_meta = tracked_flows * (13 + ref_bytes + 8 + 4)
    return {
        "cache_metadata": cache_meta,
        "lkup_metadata": lkup_meta,
        "total": cache_meta + lkup_meta,
    }


class StateManager:
    """Bounded plaintext cache + sealed untrusted store + dual cuckoo lookup."""

    def __init__(
        self,
        capacity: int,
        state_size: int,
        expiration_s: int = 60,
        env: MemoryEnv | None = None,
        store_prealloc: int | None = None,
        seed: int | None = None,
    ):
        if capacity < 2:
            raise ValueError("cache capacity must be at least 2")
        if state_size < 1:
            raise ValueError("state size must be positive")
        self.capacity = capacity
        self.state_size = state_size
        self.expiration_s = expiration_s
        self.env = env or MemoryEnv()
        self.stats = StateStats()
        self.on_evict: Callable[[bytes], None] | None = None

        rng = random.Random(seed)
        self._rng = rng
        self._hash_pair = make_hash_pair(rng.getrandbits(64))
        # key and IV drawn at init; they never leave the trusted side
        self._aead = AESGCM(rng.randbytes(16))
        self._iv4 = rng.randbytes(4)

        cache_region = self.env.alloc(ArenaKind.TRUSTED, capacity * state_size)
        whole = self.env.view(cache_region)
        self._slots = [
            CacheSlot(i, cache_region.base + i * state_size, whole[i * state_size : (i + 1) * state_size])
            for i in range(capacity)
        ]
        self._free_slots = list(reversed(self._slots))
        self._zero_state = bytes(state_size)

        self.cache_table = CuckooTable.for_capacity(capacity, rng.getrandbits(32))
        self.store_table = CuckooTable(max(64, 1 << (capacity.bit_length())), rng.getrandbits(32))

        # LRU list: head sentinel <-> most recent ... least recent <-> tail sentinel
        self._lru_head = CacheSlot(-1, 0, memoryview(b""))
        self._lru_tail = CacheSlot(-2, 0, memoryview(b""))
        self._lru_head.next = self._lru_tail
        self._lru_tail.prev = self._lru_head

        # untrusted store pool threaded through a free list; head/tail trusted
        self._entry_size = state_size + MAC_LEN
        self._pool_bases: list[int] = []
        self._pool_views: list[memoryview] = []
        self._pool_cells = 0
        self._store_head = 0
        self._store_tail = 0
        self._prealloc = store_prealloc if store_prealloc is not None else 2 * capacity
        self._grow_pool(self._prealloc)

    # ---------------------------------------------------------------- store pool

    def _grow_pool(self, entries: int) -> None:
        region = self.env.alloc(ArenaKind.UNTRUSTED, entries * self._entry_size)
        view = self.env.view(region)
        self._pool_bases.append(region.base)
        self._pool_views.append(view)
        self._pool_cells += entries
        for i in range(entries):
            self._freelist_push(region.base + i * self._entry_size)

    def _store_view(self, off: int) -> memoryview:
        from bisect import bisect_right

        i = bisect_right(self._pool_bases, off) - 1
        if i >= 0:
            view = self._pool_views[i]
            rel = off - self._pool_bases[i]
            if rel + self._entry_size <= len(view):
                return view[rel : rel + self._entry_size]
        raise AuthFailure(f"store locator {off} outside any pool")

    def _freelist_push(self, off: int) -> None:
        view = self._store_view(off)
        view[0:8] = (0).to_bytes(8, "big")
        if self._store_tail:
            self._store_view(self._store_tail)[0:8] = off.to_bytes(8, "big")
            self._store_tail = off
        else:
            self._store_head = self._store_tail = off

    def _freelist_pop(self) -> int:
        off = self._store_head
        nxt = int.from_bytes(self._store_view(off)[0:8], "big")
        self._store_head = nxt
        if nxt == 0:
            self._store_tail = 0
        return off

    def store_alloc(self) -> int:
        """Pop a free untrusted cell; grows the pool via one crossing if empty.

        Growth doubles the pool so crossings stay rare no matter how far the
        preallocation was undershot.
        """
        if self._store_head == 0:
            self.env.crossing(False, 0)  # ask the untrusted side for more cells
            self._grow_pool(max(self._prealloc, self._pool_cells))
            self.stats.store_grows += 1
        return self._freelist_pop()

    def store_free(self, off: int) -> None:
        self._freelist_push(off)

    # ----------------------------------------------------------------- LRU list

    def _lru_push_front(self, slot: CacheSlot) -> None:
        first = self._lru_head.next
        slot.prev = self._lru_head
        slot.next = first
        first.prev = slot
        self._lru_head.next = slot

    def _lru_unlink(self, slot: CacheSlot) -> None:
        slot.prev.next = slot.next
        slot.next.prev = slot.prev
        slot.prev = slot.next = None

    # ----------------------------------------------------------------- tracking

    def track(self, fid: bytes, now_s: int) -> tuple[memoryview, bool, bool]:
        """Return (pinned state region, is_new, direction_flipped) for a flow.

        Cache hit: refresh LRU position, no crypto. Cache miss: find or
        create the sealed cell, verify it lies untrusted, evict the LRU
        victim (seal under its incremented swap counter into that cell),
        then open the incoming state into the freed slot. Raises
        ``AuthFailure`` when the sealed state was tampered, replayed, or
        deleted; the flow is dropped and the manager stays consistent.
        """
        fid, flipped = canonical_fid(fid)
        h1, h2 = self._hash_pair(fid)
        stats = self.stats
        stats.tracks += 1
        # dual lookup, cache table first; inlined: this runs per packet
        table = self.cache_table
        slots = table.slots
        nb = table.nbuckets
        e = None
        b = ((h1 * nb) >> 48) * 4
        for s in (b, b + 1, b + 2, b + 3):
            c = slots[s]
            if c is not None and c.fid == fid:
                e = c
                break
        if e is None:
            b = ((h2 * nb) >> 48) * 4
            for s in (b, b + 1, b + 2, b + 3):
                c = slots[s]
                if c is not None and c.fid == fid:
                    e = c
                    break
        if e is not None:
            stats.hits += 1
            slot = e.slot
            if self._lru_head.next is not slot:
                self._lru_unlink(slot)
                self._lru_push_front(slot)
            e.last_access = now_s
            return slot.view, False, flipped

        e = self.store_table.lookup(fid, h1, h2)
        is_new = e is None
        sealed = b""
        if is_new:
            stats.new_flows += 1
            e = LkupEntry(fid, h1, h2, self._rng.getrandbits(64))
        else:
            stats.store_hits += 1
            incoming_off = e.locator
            self.env.check_memory(Region(incoming_off, self._entry_size))
            sealed = bytes(self._store_view(incoming_off))  # capture before the cell is reused

        if self._free_slots:
            slot = self._free_slots.pop()
            if not is_new:
                # no victim will reuse the cell, so recycle it now
                self.store_free(incoming_off)
        else:
            # evict the least-recently-tracked flow into an untrusted cell:
            # the incoming flow's cell when swapping, a fresh one for a new flow
            if is_new:
                cell_off = self.store_alloc()
                self.env.check_memory(Region(cell_off, self._entry_size))
            else:
                cell_off = incoming_off
            victim_slot = self._lru_tail.prev
            victim = victim_slot.entry
            victim.swap_count = (victim.swap_count + 1) & U64
            ct = seal_state(self._aead, self._iv4, victim.fid, victim.swap_count, bytes(victim_slot.view))
            stats.seals += 1
            stats.evictions += 1
            self._store_view(cell_off)[:] = ct
            self.cache_table.remove(victim.fid, victim.h1, victim.h2)
            victim.slot = None
            victim.locator = cell_off
            self._insert_with_resize("store", victim)
            self._lru_unlink(victim_slot)
            victim_slot.entry = None
            slot = victim_slot
            if self.on_evict is not None:
                self.on_evict(victim.fid)

        if is_new:
            slot.view[:] = self._zero_state
        else:
            try:
                plaintext = open_state(self._aead, self._iv4, fid, e.swap_count, sealed)
            except AuthFailure:
                stats.auth_failures += 1
                # drop the flow: its lookup entry goes away, the slot stays free
                self.store_table.remove(fid, h1, h2)
                self._free_slots.append(slot)
                raise
            stats.opens += 1
            slot.view[:] = plaintext
            self.store_table.remove(fid, h1, h2)

        slot.entry = e
        e.slot = slot
        e.locator = slot.base
        e.last_access = now_s
        self._insert_with_resize("cache", e)
        self._lru_push_front(slot)
        return slot.view, is_new, flipped

    def _insert_with_resize(self, which: str, entry: LkupEntry) -> None:
        table = self.cache_table if which == "cache" else self.store_table
        while True:
            try:
                table.insert(entry)
                return
            except NeedsResize as exc:
                entry = exc.args[0]
                table = table.grown()
                self.stats.resizes += 1
                if which == "cache":
                    self.cache_table = table
                else:
                    self.store_table = table

    def terminate(self, fid: bytes) -> bool:
        """Stop tracking a flow; clears its slot or deallocates its cell."""
        fid, _ = canonical_fid(fid)
        h1, h2 = self._hash_pair(fid)
        e = self.cache_table.remove(fid, h1, h2)
        if e is not None:
            slot = e.slot
            slot.view[:] = self._zero_state  # nullify
            self._lru_unlink(slot)
            slot.entry = None
            self._free_slots.append(slot)
            self.stats.terminations += 1
            return True
        e = self.store_table.remove(fid, h1, h2)
        if e is not None:
            self.store_free(e.locator)
            self.stats.terminations += 1
            return True
        return False

    def expire(self, now_s: int) -> int:
        """Remove store-resident flows idle past the timeout.

        Walks only the large lookup table: cache-resident flows are recent
        by construction and are not examined.
        """
        timeout = self.expiration_s
        expired = [e for e in self.store_table.entries() if now_s - e.last_access > timeout]
        for e in expired:
            self.store_table.remove(e.fid, e.h1, e.h2)
            self.store_free(e.locator)
        self.stats.expirations += len(expired)
        return len(expired)

    # ---------------------------------------------------------------- inspection

    @property
    def cached_flows(self) -> int:
        return self.capacity - len(self._free_slots)

    @property
    def tracked_flows(self) -> int:
        return self.cache_table.count + self.store_table.count

    def metadata_footprint(self) -> dict[str, int]:
        return footprint_bytes(self.capacity, self.tracked_flows)

    def store_region_of(self, fid: bytes) -> Region | None:
        """Locate a flow's sealed cell (testing/instrumentation hook)."""
        fid, _ = canonical_fid(fid)
        h1, h2 = self._hash_pair(fid)
        e = self.store_table.lookup(fid, h1, h2)
        if e is None:
            return None
        return Region(e.locator, self._entry_size)
