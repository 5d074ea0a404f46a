"""Per-level cache of semi-writable frames for page-table (de)allocation.

Frames parked here are already closed to devices, so handing one out as a
page table needs no IOMMU update and no IOTLB flush. A pop or push touches
only the head of one singly linked list and costs the same whatever the
list length or the state of the buddy allocator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ptsim.errors import (
    AlreadyDisabled,
    AlreadyEnabled,
    BadState,
    CacheDisabled,
    DuplicateFrame,
)
from ptsim.frame_table import FRAME_SIZE, PageLevel, PageTypeCode, S, W, encode_type_word
from ptsim.guest_alloc import BuddyAllocator
from ptsim.type_guard import TransitionOutcome, TypeGuard, ValidationMode

LEVELS = (PageLevel.L1, PageLevel.L2, PageLevel.L3)
_IDLE_SEMI = encode_type_word(PageTypeCode.WRITABLE, False, True, 0)


class _Node:
    __slots__ = ("frame", "next")

    def __init__(self, frame: int, next: _Node | None) -> None:  # noqa: A002
        self.frame = frame
        self.next = next


class LevelList:
    """LIFO of frame ids linked through their nodes."""

    def __init__(self, level: PageLevel) -> None:
        self.level = level
        self.head: _Node | None = None
        self.size = 0

    def push(self, frame: int) -> None:
        self.head = _Node(frame, self.head)
        self.size += 1

    def pop(self) -> int | None:
        node = self.head
        if node is None:
            return None
        self.head = node.next
        self.size -= 1
        return node.frame

    def __len__(self) -> int:
        return self.size

    def __iter__(self):
        node = self.head
        while node is not None:
            yield node.frame
            node = node.next


@dataclass
class CacheConfig:
    initial_counts: tuple[int, int, int] = (8, 32, 160)
    threshold_count: int | None = None
    threshold_proportion: float | None = None
    enabled_at_boot: bool = False

    def __post_init__(self) -> None:
        if len(self.initial_counts) != 3 or min(self.initial_counts) < 0:
            raise ValueError("initial_counts must be three non-negative integers")
        if self.threshold_count is not None and self.threshold_count < 0:
            raise ValueError("threshold_count must be non-negative")
        p = self.threshold_proportion
        if p is not None and not 0 < p <= 1:
            raise ValueError("threshold_proportion must lie in (0, 1]")


@dataclass
class CacheStats:
    cached: dict[PageLevel, int] = field(default_factory=lambda: dict.fromkeys(LEVELS, 0))
    pops: int = 0
    pushes: int = 0
    fallbacks: int = 0
    released: int = 0

    @property
    def total(self) -> int:
        return sum(self.cached.values())

    @property
    def bytes(self) -> int:
        return FRAME_SIZE * self.total


@dataclass(slots=True)
class Acquired:
    """A frame handed out by :meth:`PtCache.acquire`, ready for S->PT."""

    frame: int
    cost: int
    fallback: bool = False
    alloc_cost: int = 0
    conversion: TransitionOutcome | None = None


class ByCount(int):
    """Shrink request: release this many frames."""


class ByPercent(float):
    """Shrink request: release this percentage (0-100) of the cached frames."""


class PtCache:
    def __init__(
        self,
        guard: TypeGuard,
        buddy: BuddyAllocator,
        config: CacheConfig | None = None,
    ) -> None:
        self.guard = guard
        self.frames = guard.frames
        self.buddy = buddy
        self.meter = guard.meter
        self.costs = guard.costs
        self.config = config or CacheConfig()
        self.lists = {lv: LevelList(lv) for lv in LEVELS}
        self._members: set[int] = set()
        self.enabled = False
        self.stats = CacheStats()
        self.flush_events = 0
        self.threshold_count = self.config.threshold_count
        self.threshold_proportion = self.config.threshold_proportion

    # -- occupancy ------------------------------------------------------------

    def cached(self, level: PageLevel) -> int:
        return self.lists[level].size

    @property
    def total(self) -> int:
        return len(self._members)

    def members(self) -> frozenset[int]:
        return frozenset(self._members)

    def snapshot_stats(self) -> CacheStats:
        s = self.stats
        return CacheStats(
            {lv: self.lists[lv].size for lv in LEVELS}, s.pops, s.pushes, s.fallbacks, s.released
        )

    # -- lifecycle ----------------------------------------------------------------

    def init(self, counts: tuple[int, int, int]) -> TransitionOutcome:
        """Fill the lists with fresh frames converted W->S in one batch."""
        if self.enabled and self.total:
            raise AlreadyEnabled("cache is already populated")
        grabbed: list[int] = []
        previous_mode = self.guard.mode
        self.guard.set_mode(ValidationMode.FINE_GRAINED)
        try:
            for _ in range(sum(counts)):
                frame, _cost = self.buddy.alloc_page()
                grabbed.append(frame)
            outcome = self.guard.batch_transition(grabbed, S)
        except Exception:
            for frame in grabbed:
                self.buddy.free_page(frame)
            self.guard.set_mode(previous_mode)
            raise
        self.flush_events += outcome.flush_events
        it = iter(grabbed)
        for level, n in zip(LEVELS, counts):
            for _ in range(n):
                self._link(level, next(it))
        self.enabled = True
        return outcome

    def enable(self) -> TransitionOutcome:
        if self.enabled:
            raise AlreadyEnabled("cache already enabled")
        return self.init(self.config.initial_counts)

    def disable(self) -> int:
        """Release every cached frame and fall back to coarse validation."""
        if not self.enabled:
            raise AlreadyDisabled("cache already disabled")
        released = self._release(self.total)
        self.enabled = False
        self.guard.set_mode(ValidationMode.COARSE)
        return released

    # -- hot path -------------------------------------------------------------------

    def _link(self, level: PageLevel, frame: int) -> None:
        self.lists[level].push(frame)
        self._members.add(frame)

    def pop(self, level: PageLevel) -> int | None:
        """Take the head frame of a level list; ``None`` when that list is empty.

        An empty pop is counted as a fallback: the caller must take the
        traditional allocator path.
        """
        if not self.enabled:
            raise CacheDisabled("cache is disabled")
        self.meter.cache_op += self.costs.cache_pop
        frame = self.lists[level].pop()
        if frame is None:
            self.stats.fallbacks += 1
            return None
        self._members.discard(frame)
        self.stats.pops += 1
        return frame

    def push(self, level: PageLevel, frame: int) -> int:
        """Park a frame that just went PT->S; returns frames auto-released."""
        if not self.enabled:
            raise CacheDisabled("cache is disabled")
        if frame in self._members:
            raise DuplicateFrame(f"frame {frame} already cached")
        if self.frames.words[frame] != _IDLE_SEMI:
            raise BadState(f"frame {frame} is {self.frames.state(frame)}, not an idle S frame")
        self.meter.cache_op += self.costs.cache_push
        self._link(level, frame)
        self.stats.pushes += 1
        if self.threshold_count is None and self.threshold_proportion is None:
            return 0
        return self.auto_shrink_check()

    def acquire(self, level: PageLevel) -> Acquired:
        """Pop a frame, or take the fallback path when the list is empty.

        The fallback allocates through the buddy system and converts the
        fresh frame W->S right away, so even a miss never moves a frame
        directly between writable and page-table types.
        """
        pop_cost = self.costs.cache_pop
        frame = self.pop(level)
        if frame is not None:
            return Acquired(frame, pop_cost)
        frame, alloc_cost = self.buddy.alloc_page()
        outcome = self.guard.request_transition(frame, S)
        self.flush_events += outcome.flush_events
        return Acquired(
            frame,
            pop_cost + alloc_cost + outcome.step_cost,
            fallback=True,
            alloc_cost=alloc_cost,
            conversion=outcome,
        )

    # -- shrinking ---------------------------------------------------------------------

    def shrink(self, spec: ByCount | ByPercent) -> int:
        if not self.enabled:
            raise CacheDisabled("cache is disabled")
        if isinstance(spec, ByPercent):
            k = math.floor(float(spec) / 100 * self.total)
        else:
            k = min(int(spec), self.total)
        return self._release(k)

    def set_threshold(
        self, threshold_count: int | None = None, threshold_proportion: float | None = None
    ) -> int:
        if not self.enabled:
            raise CacheDisabled("cache is disabled")
        if threshold_proportion is not None and not 0 < threshold_proportion <= 1:
            raise ValueError("threshold_proportion must lie in (0, 1]")
        self.threshold_count = threshold_count
        self.threshold_proportion = threshold_proportion
        return self.auto_shrink_check()

    def shrink_target(self) -> int | None:
        targets = []
        if self.threshold_count is not None:
            targets.append(self.threshold_count)
        if self.threshold_proportion is not None:
            targets.append(math.floor(self.threshold_proportion * self.guard.live_page_tables()))
        return min(targets) if targets else None

    def auto_shrink_check(self) -> int:
        target = self.shrink_target()
        if target is None or self.total <= target:
            return 0
        return self._release(self.total - target)

    def _release(self, k: int) -> int:
        if k <= 0:
            return 0
        victims = []
        for _ in range(k):
            # largest list first; ties go to the deepest level
            level = max(LEVELS, key=lambda lv: (self.lists[lv].size, lv.value))
            frame = self.lists[level].pop()
            self._members.discard(frame)
            victims.append(frame)
        outcome = self.guard.batch_transition(victims, W)
        self.flush_events += outcome.flush_events
        for frame in victims:
            self.buddy.free_page(frame)
        self.stats.released += k
        return k

    def audit(self) -> list[str]:
        problems = []
        seen: set[int] = set()
        free = self.buddy.free_frames()
        for level, lst in self.lists.items():
            count = 0
            for frame in lst:
                count += 1
                if frame in seen:
                    problems.append(f"frame {frame} cached twice")
                seen.add(frame)
                if self.frames.state(frame) != S or self.frames.refcount(frame):
                    problems.append(f"cached frame {frame} is not an idle S frame")
                if frame in free:
                    problems.append(f"cached frame {frame} is also on a buddy free list")
            if count != lst.size:
                problems.append(f"{level.name} list length {count} != recorded {lst.size}")
        if seen != self._members:
            problems.append("membership index disagrees with the lists")
        return problems
