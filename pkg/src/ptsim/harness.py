"""Scenario runner: configuration, per-minute event loop, metrics and outputs.

A simulated minute is an event epoch, not wall-clock time. Each run is a
pure function of its :class:`RunConfig`; two runs with the same config
write byte-identical CSV and JSON files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from ptsim.errors import ConfigError, DmaFault, InvariantViolation, SimError, Unmapped
from ptsim.frame_table import FRAME_SIZE, PAGE_TABLE_CODES, FrameTable, PageLevel, PageTypeCode
from ptsim.guest_alloc import BuddyAllocator
from ptsim.iommu import Iommu, InvalidationScheme, perms_for_type
from ptsim.metering import CostModel, StepMeter
from ptsim.pt_cache import ByCount, ByPercent, CacheConfig, PtCache
from ptsim.type_guard import TypeGuard, ValidationMode
from ptsim.workload import ControlEvent, DmaProfile, EventGenerator, ProcessManager

log = logging.getLogger(__name__)


class Scenario(Enum):
    BASELINE = "baseline"
    PRE_ENABLED = "pre"
    DYN_ENABLED = "dyn"


CONTROL_ACTIONS = {
    "enable": False,
    "disable": False,
    "shrink_count": True,
    "shrink_percent": True,
    "threshold_count": True,
    "threshold_proportion": True,
    "threshold_clear": False,
}


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = Scenario.BASELINE
    enable_at: int = 5
    duration_minutes: int = 30
    seed: int = 1
    warmup_minutes: int = 2
    # guest memory
    pool_frames: int = 16384
    max_order: int = 10
    entries_l1: int = 4
    entries_l2: int = 512
    entries_l3: int = 512
    data_pool_frames: int = 256
    data_entries_per_l3: int = 2
    # iommu
    iotlb_capacity: int = 64
    invalidation: InvalidationScheme = InvalidationScheme.PAGE_SELECTIVE
    costs: CostModel = field(default_factory=CostModel)
    # page-table cache
    initial_counts: tuple[int, int, int] = (8, 32, 160)
    threshold_count: int | None = None
    threshold_proportion: float | None = None
    # workload
    process_rate: int = 542
    shape: tuple[int, int, int] = (1, 4, 16)
    lifetime: str = "fixed"
    lifetime_mean: float = 30.0
    lifetime_cap: float = 300.0
    dma: DmaProfile = field(default_factory=DmaProfile)
    other_per_minute: int = 0
    events: tuple[ControlEvent, ...] = ()
    audit_every: int = 10
    out: str | None = None
    summary: str | None = None

    def __post_init__(self) -> None:
        checks = [
            (self.duration_minutes >= 0, "duration_minutes must be >= 0"),
            (self.enable_at >= 0, "enable_at must be >= 0"),
            (self.pool_frames > 0, "pool_frames must be positive"),
            (self.max_order >= 0, "max_order must be >= 0"),
            (self.iotlb_capacity > 0, "iotlb_capacity must be positive"),
            (self.data_pool_frames > 0, "data_pool_frames must be positive"),
            (self.data_entries_per_l3 >= 1, "data_entries_per_l3 must be >= 1"),
            (self.process_rate >= 0, "process_rate must be >= 0"),
            (self.shape[0] == 1, "shape must start with exactly one L1 page"),
            (1 <= self.shape[1] <= self.shape[2], "shape needs 1 <= l2 <= l3"),
            (self.shape[1] <= self.entries_l1, "more L2 pages than L1 entries"),
            (self.lifetime in ("exponential", "fixed"), "lifetime must be exponential or fixed"),
            (self.lifetime_mean > 0 and self.lifetime_cap > 0, "lifetimes must be positive"),
            (self.audit_every >= 0, "audit_every must be >= 0"),
            (self.other_per_minute >= 0, "other_per_minute must be >= 0"),
            (min(self.initial_counts) >= 0, "initial_counts must be non-negative"),
        ]
        for ok, reason in checks:
            if not ok:
                raise ConfigError(None, reason)
        try:
            CacheConfig(self.initial_counts, self.threshold_count, self.threshold_proportion)
        except ValueError as exc:
            raise ConfigError(None, str(exc)) from None


# -- config text format -----------------------------------------------------------


def _int(v: str) -> int:
    return int(v, 0)


def _nonneg_int(v: str) -> int:
    n = _int(v)
    if n < 0:
        raise ValueError(f"{v} is negative")
    return n


def _pos_int(v: str) -> int:
    n = _int(v)
    if n <= 0:
        raise ValueError(f"{v} is not positive")
    return n


def _ratio(v: str) -> float:
    x = float(v)
    if not 0 <= x <= 1:
        raise ValueError(f"{v} is outside [0, 1]")
    return x


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(v: str) -> Any:
        return None if v.lower() in ("", "none", "off") else conv(v)

    return parse


def _triple(v: str) -> tuple[int, int, int]:
    parts = tuple(_nonneg_int(p) for p in v.replace("(", "").replace(")", "").split(","))
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated integers, got {v!r}")
    return parts  # type: ignore[return-value]


def _scenario(v: str) -> Scenario:
    return Scenario(v.lower())


def _scheme(v: str) -> InvalidationScheme:
    aliases = {"domain-selective": "domain", "page-selective": "page", "domain_selective": "domain",
               "page_selective": "page"}
    return InvalidationScheme(aliases.get(v.lower(), v.lower()))


def _zipf(v: str) -> float | None:
    v = v.lower()
    if v == "uniform":
        return None
    if v.startswith("zipf"):
        s = float(v.partition(":")[2] or v[4:].strip("() ") or 1.0)
        if s <= 0:
            raise ValueError("zipf exponent must be positive")
        return s
    raise ValueError(f"unknown distribution {v!r}")


def parse_events(v: str) -> tuple[ControlEvent, ...]:
    """``"5:enable, 12:shrink_percent=50"`` -> control events."""
    out = []
    for item in filter(None, (p.strip() for p in v.replace(";", ",").split(","))):
        minute, _, action = item.partition(":")
        action, _, arg = action.partition("=")
        action = action.strip()
        if action not in CONTROL_ACTIONS:
            raise ValueError(f"unknown control action {action!r}")
        if CONTROL_ACTIONS[action] != bool(arg.strip()):
            raise ValueError(f"control action {action!r} argument mismatch")
        out.append(ControlEvent(_nonneg_int(minute.strip()), action, float(arg) if arg else None))
    return tuple(out)


_TOP_KEYS: dict[str, tuple[str, Callable[[str], Any]]] = {
    "scenario": ("scenario", _scenario),
    "enable_at": ("enable_at", _nonneg_int),
    "duration_minutes": ("duration_minutes", _nonneg_int),
    "minutes": ("duration_minutes", _nonneg_int),
    "seed": ("seed", _int),
    "warmup_minutes": ("warmup_minutes", _nonneg_int),
    "pool_frames": ("pool_frames", _pos_int),
    "max_order": ("max_order", _nonneg_int),
    "entries_l1": ("entries_l1", _pos_int),
    "entries_l2": ("entries_l2", _pos_int),
    "entries_l3": ("entries_l3", _pos_int),
    "data_pool_frames": ("data_pool_frames", _pos_int),
    "data_entries_per_l3": ("data_entries_per_l3", _pos_int),
    "iotlb_capacity": ("iotlb_capacity", _pos_int),
    "invalidation": ("invalidation", _scheme),
    "initial_counts": ("initial_counts", _triple),
    "threshold_count": ("threshold_count", _optional(_nonneg_int)),
    "threshold_proportion": ("threshold_proportion", _optional(float)),
    "process_rate": ("process_rate", _nonneg_int),
    "shape": ("shape", _triple),
    "lifetime": ("lifetime", str.lower),
    "lifetime_mean": ("lifetime_mean", float),
    "lifetime_cap": ("lifetime_cap", float),
    "other_per_minute": ("other_per_minute", _nonneg_int),
    "events": ("events", parse_events),
    "audit_every": ("audit_every", _nonneg_int),
    "out": ("out", str),
    "summary": ("summary", str),
}
_DMA_KEYS: dict[str, tuple[str, Callable[[str], Any]]] = {
    "dma_rate": ("translations_per_minute", _nonneg_int),
    "dma_working_set": ("working_set_pages", _nonneg_int),
    "dma_write_fraction": ("write_fraction", _ratio),
    "dma_distribution": ("zipf_s", _zipf),
    "dma_probe_fraction": ("probe_fraction", _ratio),
}
_COST_KEYS = {f"cost_{f.name}": f.name for f in fields(CostModel)}
CONFIG_KEYS = sorted([*_TOP_KEYS, *_DMA_KEYS, *_COST_KEYS])


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    top: dict[str, Any] = {}
    dma: dict[str, Any] = {}
    costs: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(lineno, f"expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(lineno, f"duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        try:
            if key in _TOP_KEYS:
                name, conv = _TOP_KEYS[key]
                top[name] = conv(value)
            elif key in _DMA_KEYS:
                name, conv = _DMA_KEYS[key]
                dma[name] = conv(value)
            elif key in _COST_KEYS:
                costs[_COST_KEYS[key]] = _nonneg_int(value)
            else:
                raise ConfigError(lineno, f"unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(lineno, f"bad value for {key!r}: {exc}") from None
    return build_config(base, top, dma, costs)


def build_config(
    base: RunConfig | None,
    top: dict[str, Any],
    dma: dict[str, Any] | None = None,
    costs: dict[str, Any] | None = None,
) -> RunConfig:
    base = base or RunConfig()
    values = {f.name: getattr(base, f.name) for f in fields(base)}
    values.update(top)
    if dma:
        values["dma"] = DmaProfile(**{**asdict(base.dma), **dma})
    if costs:
        values["costs"] = CostModel(**{**asdict(base.costs), **costs})
    try:
        return RunConfig(**values)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(None, str(exc)) from None


# -- machine assembly -----------------------------------------------------------------


class Machine:
    """All simulator layers wired together over one frame pool."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.meter = StepMeter()
        entries = {
            PageLevel.L1: config.entries_l1,
            PageLevel.L2: config.entries_l2,
            PageLevel.L3: config.entries_l3,
        }
        self.frames = FrameTable(config.pool_frames, entries)
        self.iommu = Iommu(self.frames, config.iotlb_capacity, config.costs.walk)
        self.iommu.identity_map(domain=0)
        self.guard = TypeGuard(
            self.frames, self.iommu, self.meter, config.costs, ValidationMode.COARSE,
            config.invalidation,
        )
        self.buddy = BuddyAllocator(
            config.pool_frames, config.max_order, self.frames, self.meter, config.costs
        )
        self.cache = PtCache(
            self.guard,
            self.buddy,
            CacheConfig(config.initial_counts, config.threshold_count, config.threshold_proportion),
        )
        self.data_frames = [self.buddy.alloc_page()[0] for _ in range(config.data_pool_frames)]
        self.processes = ProcessManager(
            self.guard, self.buddy, self.cache, self.data_frames, config.data_entries_per_l3
        )
        self.meter.reset()

    def dma_working_set(self) -> list[int]:
        n = min(self.config.dma.working_set_pages, len(self.data_frames))
        return sorted(self.data_frames[:n])

    def audit(self) -> list[str]:
        """Full sweep of every cross-module invariant; empty list means clean."""
        problems = self.frames.audit() + self.cache.audit()
        ft = self.frames
        problems += [f"unmerged free buddies at {b}" for b in self.buddy.unmerged_buddies()]

        free = self.buddy.free_frames()
        cached = self.cache.members()
        owned = self.processes.owned_frames()
        data = set(self.data_frames)
        groups = [free, cached, owned, data]
        if sum(map(len, groups)) != len(ft) or set().union(*groups) != set(range(len(ft))):
            problems.append("frame conservation broken: free/cached/owned/data do not partition the pool")
        allocated = self.buddy.allocated
        if (cached | owned | data) != allocated:
            problems.append("buddy allocated set disagrees with cached/owned/data frames")

        for proc in self.processes.live.values():
            for level, frames in proc.frames.items():
                for f in frames:
                    if ft.state(f).code != level.code or not ft.is_validated(f):
                        problems.append(f"pid {proc.pid} frame {f} not a validated {level.name} table")

        expected = refcount_sweep(ft)
        for frame, raw in ft.iter_words():
            if raw & 0x3FFFFF != expected[frame]:
                problems.append(
                    f"frame {frame}: refcount {raw & 0x3FFFFF} but {expected[frame]} live references"
                )

        for frame in range(len(ft)):
            want = perms_for_type(ft.state(frame))
            for key in self.iommu.keys_for_frame(frame):
                if self.iommu.mapping(*key)[1] != want:
                    problems.append(f"mapping {key} perms disagree with frame {frame} type")
        if self.guard.mode is not (
            ValidationMode.FINE_GRAINED if self.cache.enabled else ValidationMode.COARSE
        ):
            problems.append("validation mode out of step with cache state")
        return problems

    def check(self) -> None:
        problems = self.audit()
        if problems:
            shown = "; ".join(problems[:10])
            raise InvariantViolation(f"{len(problems)} invariant violation(s): {shown}")


def refcount_sweep(frames: FrameTable) -> list[int]:
    """Recount every typed reference from validated page-table contents."""
    expected = [0] * len(frames)
    for frame in range(len(frames)):
        state = frames.state(frame)
        if state.code not in PAGE_TABLE_CODES or not frames.is_validated(frame):
            continue
        bottom = state.code == PageTypeCode.L3_PAGE_TABLE
        for entry in (frames.entries(frame) or {}).values():
            if bottom and not entry.writable:
                continue
            expected[entry.target] += 1
    return expected


# -- metrics ------------------------------------------------------------------------


@dataclass
class MetricsRow:
    minute: int
    flushes_pt: int = 0
    flushes_other: int = 0
    flushed_entries: int = 0
    iotlb_hits: int = 0
    iotlb_misses: int = 0
    miss_rate: float = 0.0
    dma_faults_blocked: int = 0
    alloc_cost_avg_l1: float = 0.0
    alloc_cost_avg_l2: float = 0.0
    alloc_cost_avg_l3: float = 0.0
    dealloc_cost_avg_l1: float = 0.0
    dealloc_cost_avg_l2: float = 0.0
    dealloc_cost_avg_l3: float = 0.0
    cache_l1: int = 0
    cache_l2: int = 0
    cache_l3: int = 0
    cache_bytes: int = 0
    fallbacks: int = 0
    processes_created: int = 0
    processes_exited: int = 0


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class RunResult:
    rows: list[MetricsRow]
    summary: dict[str, Any]
    machine: Machine
    fallback_overheads: list[int]


class _Avg:
    __slots__ = ("total", "n")

    def __init__(self) -> None:
        self.total = 0
        self.n = 0

    def add(self, x: int) -> None:
        self.total += x
        self.n += 1

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else 0.0


def _controls(config: RunConfig) -> list[ControlEvent]:
    out = []
    if config.scenario is Scenario.PRE_ENABLED:
        out.append(ControlEvent(0, "enable"))
    elif config.scenario is Scenario.DYN_ENABLED:
        out.append(ControlEvent(config.enable_at, "enable"))
    return out + list(config.events)


def apply_control(machine: Machine, ctl: ControlEvent) -> None:
    cache = machine.cache
    action, arg = ctl.action, ctl.arg
    if action == "enable":
        cache.enable()
    elif action == "disable":
        cache.disable()
    elif action == "shrink_count":
        cache.shrink(ByCount(int(arg)))
    elif action == "shrink_percent":
        cache.shrink(ByPercent(arg))
    elif action == "threshold_count":
        cache.set_threshold(int(arg), cache.threshold_proportion)
    elif action == "threshold_proportion":
        cache.set_threshold(cache.threshold_count, arg)
    elif action == "threshold_clear":
        cache.set_threshold(None, None)
    else:  # pragma: no cover - parse_events rejects these
        raise ConfigError(None, f"unknown control action {action!r}")
    log.info("minute %d: %s%s", ctl.minute, action, "" if arg is None else f"={arg:g}")


def run_scenario(config: RunConfig) -> RunResult:
    machine = Machine(config)
    iommu, cache, procs = machine.iommu, machine.cache, machine.processes
    counters = iommu.counters
    gen = EventGenerator(
        config.seed,
        process_rate=config.process_rate,
        shape=(config.shape[1], config.shape[2]),
        lifetime=config.lifetime,
        lifetime_mean=config.lifetime_mean,
        lifetime_cap=config.lifetime_cap,
        dma=config.dma,
        dma_pages=machine.dma_working_set(),
        probe_pages=config.pool_frames if config.dma.probe_fraction > 0 else 0,
        other_per_minute=config.other_per_minute,
        controls=_controls(config),
    )
    translate = iommu.translate
    rows: list[MetricsRow] = []
    created_total = exited_total = 0

    for minute in range(config.duration_minutes):
        machine.meter.reset()
        flushes0 = counters.flushes_total
        entries0 = counters.flushed_entries
        hits0, misses0 = counters.hits, counters.misses
        blocked0 = counters.dma_faults_blocked
        fallbacks0 = cache.stats.fallbacks
        alloc = {lv: _Avg() for lv in PageLevel}
        dealloc = {lv: _Avg() for lv in PageLevel}
        created = exited = flushes_other = 0

        for ev in gen.minute_events(minute):
            kind = ev.kind
            if kind == "dma":
                batch = ev.payload
                for page, is_write in zip(batch.pages, batch.writes):
                    try:
                        translate(0, page, is_write)
                    except (DmaFault, Unmapped):
                        pass
            elif kind == "create":
                pid, spec = ev.payload
                res = procs.create_process(pid, spec, minute)
                for pc in res.costs:
                    alloc[pc.level].add(pc.cost)
                created += 1
            elif kind == "exit":
                res = procs.exit_process(ev.payload)
                for pc in res.costs:
                    dealloc[pc.level].add(pc.cost)
                exited += 1
            elif kind == "control":
                try:
                    apply_control(machine, ev.payload)
                except SimError as exc:
                    raise InvariantViolation(f"control event {ev.payload} failed: {exc}") from exc
            elif kind == "other":
                before = counters.flushes_total
                procs.cycle_descriptor_page()
                flushes_other += counters.flushes_total - before

        hits = counters.hits - hits0
        misses = counters.misses - misses0
        stats = cache.lists
        row = MetricsRow(
            minute=minute,
            flushes_pt=counters.flushes_total - flushes0 - flushes_other,
            flushes_other=flushes_other,
            flushed_entries=counters.flushed_entries - entries0,
            iotlb_hits=hits,
            iotlb_misses=misses,
            miss_rate=misses / max(1, hits + misses),
            dma_faults_blocked=counters.dma_faults_blocked - blocked0,
            alloc_cost_avg_l1=alloc[PageLevel.L1].mean,
            alloc_cost_avg_l2=alloc[PageLevel.L2].mean,
            alloc_cost_avg_l3=alloc[PageLevel.L3].mean,
            dealloc_cost_avg_l1=dealloc[PageLevel.L1].mean,
            dealloc_cost_avg_l2=dealloc[PageLevel.L2].mean,
            dealloc_cost_avg_l3=dealloc[PageLevel.L3].mean,
            cache_l1=len(stats[PageLevel.L1]),
            cache_l2=len(stats[PageLevel.L2]),
            cache_l3=len(stats[PageLevel.L3]),
            cache_bytes=FRAME_SIZE * cache.total,
            fallbacks=cache.stats.fallbacks - fallbacks0,
            processes_created=created,
            processes_exited=exited,
        )
        rows.append(row)
        created_total += created
        exited_total += exited
        if config.audit_every and (minute + 1) % config.audit_every == 0:
            machine.check()
        log.debug("minute %d: %s", minute, row)

    machine.check()
    summary = summarize(config, rows, machine, created_total, exited_total)
    return RunResult(rows, summary, machine, list(procs.fallback_overheads))


def summarize(
    config: RunConfig, rows: list[MetricsRow], machine: Machine, created: int, exited: int
) -> dict[str, Any]:
    c = machine.iommu.counters
    stats = machine.cache.stats
    pops = stats.pops + stats.fallbacks
    steady = [r for r in rows if r.minute >= config.warmup_minutes]

    def mean(attr: str) -> float:
        return round(sum(getattr(r, attr) for r in steady) / len(steady), 6) if steady else 0.0

    totals = {
        name: sum(getattr(r, name) for r in rows)
        for name in (
            "flushes_pt", "flushes_other", "flushed_entries", "iotlb_hits", "iotlb_misses",
            "dma_faults_blocked", "fallbacks", "processes_created", "processes_exited",
        )
    }
    overheads = machine.processes.fallback_overheads
    return {
        "scenario": config.scenario.value,
        "enable_at": config.enable_at if config.scenario is Scenario.DYN_ENABLED else None,
        "seed": config.seed,
        "minutes": config.duration_minutes,
        "invalidation": config.invalidation.value,
        "shape": list(config.shape),
        "process_rate": config.process_rate,
        "totals": totals,
        "pops": pops,
        "fallbacks": stats.fallbacks,
        "fallback_ratio": round(stats.fallbacks / pops, 9) if pops else 0.0,
        "max_fallback_overhead": max(overheads) if overheads else None,
        "steady_state": {
            "from_minute": config.warmup_minutes,
            **{f"{name}_avg": mean(name) for name in (
                "flushes_pt", "miss_rate",
                "alloc_cost_avg_l1", "alloc_cost_avg_l2", "alloc_cost_avg_l3",
                "dealloc_cost_avg_l1", "dealloc_cost_avg_l2", "dealloc_cost_avg_l3",
            )},
        },
        "cache": {
            "enabled": machine.cache.enabled,
            "l1": machine.cache.cached(PageLevel.L1),
            "l2": machine.cache.cached(PageLevel.L2),
            "l3": machine.cache.cached(PageLevel.L3),
            "bytes": FRAME_SIZE * machine.cache.total,
            "released": stats.released,
        },
        "iommu": {
            "flushes_total": c.flushes_total,
            "flushed_entries": c.flushed_entries,
            "hits": c.hits,
            "misses": c.misses,
            "insertions": c.insertions,
            "walk_cost": c.walk_cost,
        },
        "security": {
            "unsafe_dma_writes": c.unsafe_writes,
            "stale_translations": c.stale_translations,
            "dma_faults_blocked": c.dma_faults_blocked,
        },
        "live_processes": len(machine.processes.live),
        "created_check": created,
        "exited_check": exited,
    }


def _fmt(value: Any) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def summary_to_json(summary: dict[str, Any]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def write_outputs(
    rows: list[MetricsRow],
    summary: dict[str, Any],
    csv_path: str | Path | None,
    json_path: str | Path | None,
) -> None:
    if csv_path is not None:
        Path(csv_path).write_text(rows_to_csv(rows))
    if json_path is not None:
        Path(json_path).write_text(summary_to_json(summary))
