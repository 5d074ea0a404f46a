"""The guest's traditional page allocator: slab front plus buddy system.

The slab layer is reduced to a fixed front cost; what matters here is the
depth of the path a page-table allocation walks, not object caching.
"""

from __future__ import annotations

from ptsim.errors import BadState, NotAllocated, OutOfMemory
from ptsim.frame_table import FrameTable, PageTypeCode, encode_type_word
from ptsim.metering import CostModel, StepMeter


_IDLE_WRITABLE = encode_type_word(PageTypeCode.WRITABLE, False, False, 0)


class BuddyAllocator:
    """Power-of-two block allocator with eager coalescing.

    ``free_lists[k]`` holds the base frame of every free block of ``2**k``
    frames. Each list is an insertion-ordered dict so that a block can be
    unlinked in O(1) when its buddy is freed, while allocation still takes
    the most recently freed block first.
    """

    def __init__(
        self,
        pool_size: int,
        max_order: int = 10,
        frames: FrameTable | None = None,
        meter: StepMeter | None = None,
        costs: CostModel | None = None,
    ) -> None:
        if pool_size <= 0 or max_order < 0:
            raise ValueError("pool_size must be positive and max_order non-negative")
        self.pool_size = pool_size
        self.max_order = max_order
        self.frames = frames
        self.meter = meter if meter is not None else StepMeter()
        self.costs = costs or CostModel()
        self.free_lists: list[dict[int, None]] = [{} for _ in range(max_order + 1)]
        self._allocated: set[int] = set()
        self._seed_pool()

    def _seed_pool(self) -> None:
        base = 0
        while base < self.pool_size:
            order = self.max_order
            while order and (base % (1 << order) or base + (1 << order) > self.pool_size):
                order -= 1
            self.free_lists[order][base] = None
            base += 1 << order

    @property
    def free_count(self) -> int:
        return sum(len(lst) << k for k, lst in enumerate(self.free_lists))

    @property
    def allocated(self) -> frozenset[int]:
        return frozenset(self._allocated)

    def is_allocated(self, frame: int) -> bool:
        return frame in self._allocated

    def alloc_page(self) -> tuple[int, int]:
        """Hand out one order-0 frame; returns ``(frame, step_cost)``."""
        order = 0
        lists = self.free_lists
        while order <= self.max_order and not lists[order]:
            order += 1
        if order > self.max_order:
            raise OutOfMemory("no free frames left")
        base, _ = lists[order].popitem()
        splits = order
        while order:
            order -= 1
            lists[order][base + (1 << order)] = None
        self._allocated.add(base)
        c = self.costs
        m = self.meter
        m.slab_front += c.slab_front
        m.list_ops += c.list_op
        m.splits += splits * c.split
        return base, c.slab_front + c.list_op + splits * c.split

    def free_page(self, frame: int) -> int:
        """Return a frame and merge it with free buddies; returns the step cost."""
        if frame not in self._allocated:
            raise NotAllocated(f"frame {frame} is not allocated")
        if self.frames is not None:
            if self.frames.words[frame] != _IDLE_WRITABLE:
                raise BadState(
                    f"frame {frame} is {self.frames.state(frame)} with refcount "
                    f"{self.frames.refcount(frame)}; only unreferenced writable frames can be freed"
                )
        self._allocated.discard(frame)
        lists = self.free_lists
        base, order, merges = frame, 0, 0
        while order < self.max_order:
            buddy = base ^ (1 << order)
            if buddy not in lists[order]:
                break
            del lists[order][buddy]
            base = min(base, buddy)
            order += 1
            merges += 1
        lists[order][base] = None
        c = self.costs
        self.meter.list_ops += c.list_op
        self.meter.merges += merges * c.merge
        return c.list_op + merges * c.merge

    def meter_snapshot(self) -> StepMeter:
        return self.meter.snapshot()

    def free_frames(self) -> set[int]:
        out = set()
        for k, lst in enumerate(self.free_lists):
            for base in lst:
                out.update(range(base, base + (1 << k)))
        return out

    def unmerged_buddies(self) -> list[tuple[int, int]]:
        """Pairs of free buddy blocks left unmerged (should always be empty)."""
        pairs = []
        for k in range(self.max_order):
            for base in self.free_lists[k]:
                buddy = base ^ (1 << k)
                if base < buddy and buddy in self.free_lists[k]:
                    pairs.append((base, k))
        return pairs
