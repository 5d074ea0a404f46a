"""IOMMU page table, per-type DMA permissions and an LRU IOTLB.

The IOMMU never consults frame types on its own: permissions are written
into mappings by whoever changes a frame's type (the type guard), and the
IOTLB keeps serving whatever it cached until it is flushed. That gap
between ``set_frame_dma_perms`` and ``flush`` is the staleness window the
flush protocol exists to close.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from ptsim.errors import AlreadyMapped, DmaFault, MissingSelector, Unmapped
from ptsim.frame_table import FrameTable, PageTypeCode, TypeState


class DmaPerms(NamedTuple):
    read: bool
    write: bool


RW = DmaPerms(True, True)
NO_ACCESS = DmaPerms(False, False)


class InvalidationScheme(Enum):
    GLOBAL = "global"
    DOMAIN_SELECTIVE = "domain"
    PAGE_SELECTIVE = "page"


def perms_for_type(state: TypeState) -> DmaPerms:
    """Only plain writable frames are reachable by devices."""
    if state.code == PageTypeCode.WRITABLE and not state.semi:
        return RW
    return NO_ACCESS


Key = tuple[int, int]


@dataclass
class IommuCounters:
    hits: int = 0
    misses: int = 0
    flushes_total: int = 0
    flushed_entries: int = 0
    insertions: int = 0
    evictions: int = 0
    dma_faults_blocked: int = 0
    walk_cost: int = 0
    # security audit: both must stay at zero while the guard mediates types
    unsafe_writes: int = 0
    stale_translations: int = 0


class Iommu:
    def __init__(self, frames: FrameTable, capacity: int = 64, walk_cost: int = 10) -> None:
        if capacity <= 0:
            raise ValueError("IOTLB capacity must be positive")
        self.frames = frames
        self.capacity = capacity
        self.walk_cost = walk_cost
        self._mappings: dict[Key, tuple[int, DmaPerms]] = {}
        self._keys_by_frame: dict[int, list[Key]] = {}
        # key -> (frame, perms); order is recency, oldest first
        self._iotlb: OrderedDict[Key, tuple[int, DmaPerms]] = OrderedDict()
        self.counters = IommuCounters()

    # -- IOMMU page table ---------------------------------------------------

    def map_io(self, domain: int, io_page: int, frame: int) -> None:
        key = (domain, io_page)
        if key in self._mappings:
            raise AlreadyMapped(f"io page {io_page} of domain {domain} already mapped")
        self._mappings[key] = (frame, perms_for_type(self.frames.state(frame)))
        self._keys_by_frame.setdefault(frame, []).append(key)

    def identity_map(self, domain: int = 0) -> None:
        """Map io page ``i`` to frame ``i`` for the whole pool."""
        for frame in range(len(self.frames)):
            self.map_io(domain, frame, frame)

    def mapping(self, domain: int, io_page: int) -> tuple[int, DmaPerms] | None:
        return self._mappings.get((domain, io_page))

    def keys_for_frame(self, frame: int) -> list[Key]:
        return self._keys_by_frame.get(frame, [])

    def set_frame_dma_perms(self, frame: int, perms: DmaPerms) -> int:
        """Rewrite the perms of every mapping onto ``frame``. Does not flush."""
        keys = self._keys_by_frame.get(frame, ())
        for key in keys:
            self._mappings[key] = (frame, perms)
        return len(keys)

    def set_perms_and_flush_pages(self, frame: int, perms: DmaPerms) -> int:
        """``set_frame_dma_perms`` then a page-selective flush of each key.

        Returns the number of keys touched, which is both the update count
        and the flush count.
        """
        keys = self._keys_by_frame.get(frame, ())
        mappings = self._mappings
        pop = self._iotlb.pop
        removed = 0
        for key in keys:
            mappings[key] = (frame, perms)
            if pop(key, None) is not None:
                removed += 1
        c = self.counters
        c.flushes_total += len(keys)
        c.flushed_entries += removed
        return len(keys)

    # -- IOTLB ----------------------------------------------------------------

    def flush(
        self,
        scheme: InvalidationScheme,
        domain: int | None = None,
        io_page: int | None = None,
    ) -> int:
        """Invalidate IOTLB entries at the given granularity; returns how many."""
        if scheme is InvalidationScheme.GLOBAL:
            removed = len(self._iotlb)
            self._iotlb.clear()
        elif scheme is InvalidationScheme.DOMAIN_SELECTIVE:
            if domain is None:
                raise MissingSelector("domain-selective flush needs a domain")
            stale = [k for k in self._iotlb if k[0] == domain]
            for k in stale:
                del self._iotlb[k]
            removed = len(stale)
        else:
            if domain is None or io_page is None:
                raise MissingSelector("page-selective flush needs a domain and io page")
            return self.flush_page(domain, io_page)
        self.counters.flushes_total += 1
        self.counters.flushed_entries += removed
        return removed

    def flush_page(self, domain: int, io_page: int) -> int:
        """Page-selective invalidation of one key."""
        removed = 1 if self._iotlb.pop((domain, io_page), None) is not None else 0
        c = self.counters
        c.flushes_total += 1
        c.flushed_entries += removed
        return removed

    def cached_keys(self) -> list[Key]:
        """IOTLB contents, least recently used first."""
        return list(self._iotlb)

    def cached(self, domain: int, io_page: int) -> tuple[int, DmaPerms] | None:
        return self._iotlb.get((domain, io_page))

    def translate(self, domain: int, io_page: int, is_write: bool) -> int:
        """Translate a device access; returns the frame or raises.

        Raises:
            Unmapped: no IOMMU mapping for the io page.
            DmaFault: the (possibly cached) permissions deny the access.
        """
        key = (domain, io_page)
        c = self.counters
        hit = self._iotlb.get(key)
        if hit is not None:
            c.hits += 1
            self._iotlb.move_to_end(key)
            frame, perms = hit
        else:
            mapped = self._mappings.get(key)
            if mapped is None:
                c.misses += 1
                raise Unmapped(f"io page {io_page} of domain {domain} is not mapped")
            c.misses += 1
            c.walk_cost += self.walk_cost
            frame, perms = mapped
            if len(self._iotlb) >= self.capacity:
                self._iotlb.popitem(last=False)
                c.evictions += 1
            self._iotlb[key] = mapped
            c.insertions += 1
        if not (perms.write if is_write else perms.read):
            c.dma_faults_blocked += 1
            raise DmaFault(
                f"{'write' if is_write else 'read'} to frame {frame} denied "
                f"(io page {io_page}, domain {domain})"
            )
        if hit is not None and self._mappings.get(key) != hit:
            c.stale_translations += 1
        if is_write and perms_for_type(self.frames.state(frame)) != RW:
            c.unsafe_writes += 1
        return frame
