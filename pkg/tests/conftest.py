from __future__ import annotations

from dataclasses import dataclass

import pytest

from ptsim.frame_table import FrameTable, PageLevel, PtEntry
from ptsim.guest_alloc import BuddyAllocator
from ptsim.iommu import Iommu, InvalidationScheme
from ptsim.metering import StepMeter
from ptsim.pt_cache import CacheConfig, PtCache
from ptsim.type_guard import TypeGuard, ValidationMode


@dataclass
class Stack:
    frames: FrameTable
    iommu: Iommu
    meter: StepMeter
    guard: TypeGuard
    buddy: BuddyAllocator
    cache: PtCache


def make_stack(
    pool: int = 64,
    mode: ValidationMode = ValidationMode.COARSE,
    scheme: InvalidationScheme = InvalidationScheme.PAGE_SELECTIVE,
    capacity: int = 64,
    max_order: int = 6,
    cache_config: CacheConfig | None = None,
    keep_history: bool = False,
) -> Stack:
    frames = FrameTable(pool)
    iommu = Iommu(frames, capacity=capacity)
    iommu.identity_map(0)
    meter = StepMeter()
    guard = TypeGuard(frames, iommu, meter, mode=mode, scheme=scheme, keep_history=keep_history)
    buddy = BuddyAllocator(pool, max_order, frames, meter)
    cache = PtCache(guard, buddy, cache_config)
    return Stack(frames, iommu, meter, guard, buddy, cache)


def entries(*targets: int, writable: bool = True) -> dict[int, PtEntry]:
    return {slot: PtEntry(True, t, writable) for slot, t in enumerate(targets)}


@pytest.fixture
def stack() -> Stack:
    return make_stack()


@pytest.fixture
def fine_stack() -> Stack:
    return make_stack(mode=ValidationMode.FINE_GRAINED)


LEVELS = (PageLevel.L1, PageLevel.L2, PageLevel.L3)


# -- full-length scenario runs, shared by the harness and acceptance tests ------

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_runs():
    import time

    from ptsim.harness import RunConfig, Scenario, run_scenario

    out = {}
    for scenario in Scenario:
        start = time.perf_counter()
        result = run_scenario(RunConfig(scenario=scenario))
        out[scenario] = (result, time.perf_counter() - start)
    return out
