"""Seeded process-churn and DMA traffic generators.

Every process owns a three-level page table. Creating one allocates and
validates its table bottom-up; exiting tears it down top-down so each
level's references are gone before the level below is released.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from ptsim.errors import InvariantViolation, SimError
from ptsim.frame_table import PT_STATES, O, PageLevel, PtEntry, S, W
from ptsim.guest_alloc import BuddyAllocator
from ptsim.pt_cache import PtCache
from ptsim.type_guard import TypeGuard


@dataclass(frozen=True)
class ProcessSpec:
    """Page-table shape ``(1, l2_pages, l3_pages)`` plus a lifetime in seconds."""

    l2_pages: int = 4
    l3_pages: int = 16
    lifetime: float = 30.0

    def __post_init__(self) -> None:
        if self.l2_pages < 1 or self.l3_pages < self.l2_pages:
            raise ValueError("shape needs l2_pages >= 1 and l3_pages >= l2_pages")

    @property
    def pages(self) -> int:
        return 1 + self.l2_pages + self.l3_pages


@dataclass
class LiveProcess:
    pid: int
    frames: dict[PageLevel, list[int]]
    created_minute: int = 0

    def all_frames(self) -> list[int]:
        return [f for lv in PageLevel for f in self.frames[lv]]


@dataclass(frozen=True)
class DmaProfile:
    translations_per_minute: int = 10000
    working_set_pages: int = 128
    write_fraction: float = 0.3
    zipf_s: float | None = None  # None means uniform
    probe_fraction: float = 0.001

    def __post_init__(self) -> None:
        if not 0 <= self.write_fraction <= 1:
            raise ValueError("write_fraction must lie in [0, 1]")
        if not 0 <= self.probe_fraction <= 1:
            raise ValueError("probe_fraction must lie in [0, 1]")


@dataclass(slots=True)
class PathCost:
    """One page-table page allocation or release, as seen by the guest."""

    level: PageLevel
    cost: int
    fallback: bool = False
    baseline_equivalent: int | None = None


@dataclass
class ProcessResult:
    process: LiveProcess
    costs: list[PathCost] = field(default_factory=list)
    flush_events: int = 0
    pops: int = 0
    pushes: int = 0


class ProcessManager:
    """Builds and tears down per-process page tables through the guard."""

    def __init__(
        self,
        guard: TypeGuard,
        buddy: BuddyAllocator,
        cache: PtCache,
        data_frames: list[int],
        data_entries_per_l3: int = 2,
    ) -> None:
        if not data_frames:
            raise ValueError("need at least one shared data frame")
        self.guard = guard
        self.frames = guard.frames
        self.buddy = buddy
        self.cache = cache
        self.data_frames = list(data_frames)
        self._data_ptes = [PtEntry(True, f, True) for f in self.data_frames]
        self.data_entries_per_l3 = data_entries_per_l3
        self.live: dict[int, LiveProcess] = {}
        self._data_cursor = 0
        self.fallback_overheads: list[int] = []

    def _obtain(self, level: PageLevel, result: ProcessResult) -> tuple[int, int, Any]:
        if self.cache.enabled:
            got = self.cache.acquire(level)
            if got.fallback:
                result.flush_events += got.conversion.flush_events
            else:
                result.pops += 1
            return got.frame, got.cost, got
        frame, cost = self.buddy.alloc_page()
        return frame, cost, None

    def _install(self, level: PageLevel, entries: dict[int, PtEntry], result: ProcessResult) -> int:
        frame, cost, got = self._obtain(level, result)
        self.frames.write_entries(frame, level, entries)
        outcome = self.guard.request_transition(frame, PT_STATES[level])
        result.flush_events += outcome.flush_events
        total = cost + outcome.step_cost
        path = PathCost(level, total)
        if got is not None and got.fallback:
            conv = got.conversion
            path.fallback = True
            path.baseline_equivalent = got.alloc_cost + self.guard.coarse_cost(
                outcome.validation_cost, conv.iommu_updates, conv.flush_events
            )
            self.fallback_overheads.append(total - path.baseline_equivalent)
        result.costs.append(path)
        return frame

    def _data_entries(self) -> dict[int, PtEntry]:
        ptes = self._data_ptes
        n = len(ptes)
        cursor = self._data_cursor
        self._data_cursor = cursor + self.data_entries_per_l3
        return {slot: ptes[(cursor + slot) % n] for slot in range(self.data_entries_per_l3)}

    def create_process(self, pid: int, spec: ProcessSpec, minute: int = 0) -> ProcessResult:
        if pid in self.live:
            raise InvariantViolation(f"pid {pid} already live")
        proc = LiveProcess(pid, {lv: [] for lv in PageLevel}, minute)
        result = ProcessResult(proc)
        try:
            l3 = proc.frames[PageLevel.L3]
            for _ in range(spec.l3_pages):
                l3.append(self._install(PageLevel.L3, self._data_entries(), result))
            l2 = proc.frames[PageLevel.L2]
            for i in range(spec.l2_pages):
                children = l3[i :: spec.l2_pages]
                entries = {slot: PtEntry(True, f, True) for slot, f in enumerate(children)}
                l2.append(self._install(PageLevel.L2, entries, result))
            entries = {slot: PtEntry(True, f, True) for slot, f in enumerate(l2)}
            proc.frames[PageLevel.L1] = [self._install(PageLevel.L1, entries, result)]
        except (SimError, IndexError) as exc:
            raise InvariantViolation(f"creating pid {pid} failed: {exc}") from exc
        self.live[pid] = proc
        return result

    def exit_process(self, pid: int) -> ProcessResult:
        proc = self.live.pop(pid, None)
        if proc is None:
            raise InvariantViolation(f"pid {pid} is not live")
        result = ProcessResult(proc)
        cached = self.cache.enabled
        try:
            for level in PageLevel:
                for frame in proc.frames[level]:
                    outcome = self.guard.request_transition(frame, S if cached else W)
                    result.flush_events += outcome.flush_events
                    if cached:
                        before = self.cache.flush_events
                        self.cache.push(level, frame)
                        result.flush_events += self.cache.flush_events - before
                        result.pushes += 1
                        cost = outcome.step_cost + self.guard.costs.cache_push
                    else:
                        cost = outcome.step_cost + self.buddy.free_page(frame)
                    result.costs.append(PathCost(level, cost))
        except SimError as exc:
            raise InvariantViolation(f"exiting pid {pid} failed: {exc}") from exc
        return result

    def cycle_descriptor_page(self) -> int:
        """Allocate a page, use it as a descriptor table, release it. Returns flushes."""
        frame, _ = self.buddy.alloc_page()
        flushes = self.guard.request_transition(frame, O).flush_events
        flushes += self.guard.request_transition(frame, W).flush_events
        self.buddy.free_page(frame)
        return flushes

    def owned_frames(self) -> set[int]:
        out: set[int] = set()
        for proc in self.live.values():
            out.update(proc.all_frames())
        return out


class DmaBatch(NamedTuple):
    """Device accesses that run back to back, in order."""

    pages: list[int]
    writes: list[bool]


class Event(NamedTuple):
    time: float
    rank: int
    seq: int
    kind: str
    payload: Any


# same-instant ordering: control, exit, create, other, dma
RANK = {"control": 0, "exit": 1, "create": 2, "other": 3, "dma": 4}


@dataclass(frozen=True)
class ControlEvent:
    minute: int
    action: str
    arg: float | None = None


class EventGenerator:
    """Deterministic per-minute event streams for a fixed seed.

    Must be driven minute by minute in order: exits scheduled by earlier
    minutes' creations are carried in a heap.
    """

    def __init__(
        self,
        seed: int,
        *,
        process_rate: int = 542,
        shape: tuple[int, int] = (4, 16),
        lifetime: str = "exponential",
        lifetime_mean: float = 30.0,
        lifetime_cap: float = 300.0,
        dma: DmaProfile | None = None,
        dma_pages: list[int] | None = None,
        probe_pages: int = 0,
        other_per_minute: int = 0,
        controls: list[ControlEvent] | None = None,
    ) -> None:
        if lifetime not in ("exponential", "fixed"):
            raise ValueError(f"unknown lifetime distribution {lifetime!r}")
        self.process_rate = process_rate
        self.shape = shape
        self.lifetime = lifetime
        self.lifetime_mean = lifetime_mean
        self.lifetime_cap = lifetime_cap
        self.dma = dma or DmaProfile()
        self.dma_pages = list(dma_pages or [])
        self.probe_pages = probe_pages
        self.other_per_minute = other_per_minute
        self.controls = sorted(controls or [], key=lambda c: c.minute)
        life_seq, dma_seq = np.random.SeedSequence(seed).spawn(2)
        self._life_rng = np.random.default_rng(life_seq)
        self._dma_rng = np.random.default_rng(dma_seq)
        self._exits: list[tuple[float, int]] = []
        self._next_pid = 0
        self._next_minute = 0
        self._dma_p = None
        if self.dma.zipf_s is not None and self.dma_pages:
            ranks = np.arange(1, len(self.dma_pages) + 1, dtype=float)
            w = ranks ** -self.dma.zipf_s
            self._dma_p = w / w.sum()

    def _lifetimes(self, n: int) -> np.ndarray:
        if self.lifetime == "fixed":
            return np.full(n, min(self.lifetime_mean, self.lifetime_cap))
        draws = self._life_rng.exponential(self.lifetime_mean, n)
        # a zero lifetime would let the exit sort ahead of its own creation
        return np.clip(draws, 1e-3, self.lifetime_cap)

    def minute_events(self, minute: int) -> list[Event]:
        if minute != self._next_minute:
            raise ValueError(f"minutes must be generated in order; expected {self._next_minute}")
        self._next_minute += 1
        start = minute * 60.0
        end = start + 60.0
        events: list[Event] = []
        seq = 0

        for ctl in self.controls:
            if ctl.minute == minute:
                events.append(Event(start, RANK["control"], seq, "control", ctl))
                seq += 1

        n = self.process_rate
        if n:
            spacing = 60.0 / n
            lifetimes = self._lifetimes(n)
            l2, l3 = self.shape
            for i in range(n):
                t = start + (i + 0.5) * spacing
                life = float(lifetimes[i])
                pid = self._next_pid
                self._next_pid += 1
                heapq.heappush(self._exits, (t + life, pid))
                events.append(Event(t, RANK["create"], seq, "create", (pid, ProcessSpec(l2, l3, life))))
                seq += 1

        for i in range(self.other_per_minute):
            t = start + (i + 0.5) * 60.0 / self.other_per_minute
            events.append(Event(t, RANK["other"], seq, "other", None))
            seq += 1

        while self._exits and self._exits[0][0] < end:
            t, pid = heapq.heappop(self._exits)
            events.append(Event(t, RANK["exit"], seq, "exit", pid))
            seq += 1
        events.sort()

        m = self.dma.translations_per_minute
        if not m or not (self.dma_pages or self.probe_pages):
            return events
        rng = self._dma_rng
        if self.dma_pages:
            idx = rng.choice(len(self.dma_pages), size=m, p=self._dma_p)
            pages = np.asarray(self.dma_pages)[idx]
        else:
            pages = np.zeros(m, dtype=np.int64)
        writes = rng.random(m) < self.dma.write_fraction
        if self.probe_pages:
            probes = rng.random(m) < self.dma.probe_fraction
            if not self.dma_pages:
                probes[:] = True
            targets = rng.integers(0, self.probe_pages, size=m)
            pages = np.where(probes, targets, pages)
        times = start + (np.arange(m) + 0.5) * (60.0 / m)
        # DMA ranks last, so access j runs after every other event at or
        # before its time; consecutive accesses sharing a slot form one batch
        slot = np.searchsorted(np.array([e.time for e in events]), times, side="right")
        cuts = np.flatnonzero(np.diff(slot)) + 1
        bounds = [0, *cuts.tolist(), m]
        pages_l, writes_l, slot_l = pages.tolist(), writes.tolist(), slot.tolist()
        merged: list[Event] = []
        cursor = 0
        for a, b in zip(bounds, bounds[1:]):
            pos = slot_l[a]
            merged.extend(events[cursor:pos])
            cursor = pos
            batch = DmaBatch(pages_l[a:b], writes_l[a:b])
            merged.append(Event(float(times[a]), RANK["dma"], seq, "dma", batch))
            seq += 1
        merged.extend(events[cursor:])
        return merged

    @property
    def pending_exits(self) -> int:
        return len(self._exits)
