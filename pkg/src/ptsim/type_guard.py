"""Hypervisor-side page-type validation: the transition state machine.

Two modes share one engine. In coarse mode page-table pages move directly
between writable and page-table types and every such move rewrites the
frame's IOMMU permissions and flushes the IOTLB. In fine-grained mode a
page-table page can only be reached through the semi-writable state, which
is already closed to devices, so the costly DMA half of the validation is
paid once on W<->S and skipped on S<->PT.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable

from ptsim.errors import (
    ContentInvalid,
    EdgeNotAllowed,
    RefCountNonZero,
    RefcountOverflow,
    StillReferenced,
    TransitionError,
    TypeMismatch,
)
from ptsim.frame_table import (
    _STATE_BY_INDEX,
    MAX_REFCOUNT,
    PT_STATES,
    REFCOUNT_MASK,
    TYPE_SHIFT,
    FrameTable,
    O,
    PageLevel,
    PageTypeCode,
    S,
    TypeState,
    VALIDATED_BIT,
    W,
    encode_type_word,
)
from ptsim.iommu import NO_ACCESS, RW, Iommu, InvalidationScheme, perms_for_type
from ptsim.metering import CostModel, StepMeter


class ValidationMode(Enum):
    COARSE = "coarse"
    FINE_GRAINED = "fine"


@dataclass(slots=True)
class TransitionOutcome:
    accepted: bool = True
    reject_reason: str | None = None
    dma_validation_performed: bool = False
    iommu_updates: int = 0
    flush_events: int = 0
    step_cost: int = 0
    validation_cost: int = 0
    references: int = 0


@lru_cache(maxsize=None)
def allowed_edges(mode: ValidationMode) -> frozenset[tuple[TypeState, TypeState]]:
    pts = tuple(PT_STATES.values())
    if mode is ValidationMode.COARSE:
        pairs = [(W, pt) for pt in pts] + [(W, O)]
    else:
        pairs = [(W, S)] + [(S, pt) for pt in pts] + [(W, O)]
    return frozenset(pairs + [(b, a) for a, b in pairs])


_EDGES = {mode: allowed_edges(mode) for mode in ValidationMode}


def dma_accessible(state: TypeState) -> bool:
    return state == W


_LEVEL_OF = {state: level for level, state in PT_STATES.items()}
_WORD_FOR = {
    state: encode_type_word(state.code, state in _LEVEL_OF, state.semi, 0)
    for state in (W, S, O, *PT_STATES.values())
}
_WRITABLE_CODE = int(PageTypeCode.WRITABLE)
# code a child table must carry, per parent level; None for the bottom level
_CHILD_CODE = {
    PageLevel.L1: int(PageTypeCode.L2_PAGE_TABLE),
    PageLevel.L2: int(PageTypeCode.L3_PAGE_TABLE),
    PageLevel.L3: None,
}


class TypeGuard:
    """Mediates every type change of every frame.

    Rejections raise a :class:`~ptsim.errors.TransitionError` subclass whose
    ``outcome`` has ``accepted=False``; a rejected call leaves every type
    word exactly as it found it.
    """

    def __init__(
        self,
        frames: FrameTable,
        iommu: Iommu,
        meter: StepMeter | None = None,
        costs: CostModel | None = None,
        mode: ValidationMode = ValidationMode.COARSE,
        scheme: InvalidationScheme = InvalidationScheme.PAGE_SELECTIVE,
        keep_history: bool = False,
    ) -> None:
        self.frames = frames
        self.iommu = iommu
        self.meter = meter if meter is not None else StepMeter()
        self.costs = costs or CostModel()
        self.mode = mode
        self.scheme = scheme
        self.history: list[tuple[int, TypeState, TypeState, ValidationMode]] | None = (
            [] if keep_history else None
        )

    def set_mode(self, mode: ValidationMode) -> None:
        self.mode = mode

    def live_page_tables(self) -> int:
        f = self.frames
        return (
            f.count(PageTypeCode.L1_PAGE_TABLE)
            + f.count(PageTypeCode.L2_PAGE_TABLE)
            + f.count(PageTypeCode.L3_PAGE_TABLE)
        )

    def coarse_cost(self, validation_cost: int, iommu_updates: int, flush_events: int) -> int:
        """Cost the baseline path would charge for one W<->PT transition."""
        c = self.costs
        return (
            c.hypercall
            + c.bookkeeping
            + validation_cost
            + iommu_updates * c.iommu_update
            + flush_events * c.flush_op
        )

    # -- single transitions -------------------------------------------------

    def _reject(self, exc_type: type[TransitionError], message: str, **kw) -> TransitionError:
        outcome = TransitionOutcome(accepted=False, reject_reason=exc_type.reason)
        return exc_type(message, outcome, **kw)

    def _precheck(self, frame: int, target: TypeState) -> TypeState:
        source = self.frames.state(frame)
        if (source, target) not in _EDGES[self.mode]:
            raise self._reject(
                EdgeNotAllowed,
                f"frame {frame}: {source} -> {target} not allowed in {self.mode.value} mode",
            )
        if self.frames.words[frame] & REFCOUNT_MASK:
            raise self._reject(
                RefCountNonZero,
                f"frame {frame} has type refcount {self.frames.refcount(frame)}",
            )
        return source

    def request_transition(self, frame: int, target: TypeState) -> TransitionOutcome:
        """Move one frame to ``target``, validating contents and DMA as needed."""
        # hot path: the checks of _precheck/_commit, inlined for one frame
        words = self.frames.words
        if not 0 <= frame < len(words):
            raise IndexError(f"frame {frame} outside pool of {len(words)}")
        raw = words[frame]
        source = _STATE_BY_INDEX[(raw >> 27) & ~1 | (raw >> 22) & 1]
        if (source, target) not in _EDGES[self.mode]:
            raise self._reject(
                EdgeNotAllowed,
                f"frame {frame}: {source} -> {target} not allowed in {self.mode.value} mode",
            )
        if raw & REFCOUNT_MASK:
            raise self._reject(
                RefCountNonZero, f"frame {frame} has type refcount {raw & REFCOUNT_MASK}"
            )
        level = _LEVEL_OF.get(target)
        if level is not None:
            validation_cost, taken = self._validate_contents(frame, level)
            references = len(taken)
        else:
            validation_cost = references = 0
            if raw & VALIDATED_BIT:
                validation_cost, references = self._devalidate_contents(frame, _LEVEL_OF[source])

        updates = flushes = 0
        dma = source == W or target == W
        if dma:
            perms = RW if target == W else NO_ACCESS
            if self.scheme is InvalidationScheme.PAGE_SELECTIVE:
                updates = flushes = self.iommu.set_perms_and_flush_pages(frame, perms)
            else:
                updates = self.iommu.set_frame_dma_perms(frame, perms)
                flushes = self._flush_for((frame,))
        self.frames.set_word(frame, _WORD_FOR[target], checked=True)
        if self.history is not None:
            self.history.append((frame, source, target, self.mode))
        # _charge for n=1, inlined
        c = self.costs
        m = self.meter
        upd = updates * c.iommu_update
        fl = flushes * c.flush_op
        m.hypercall += c.hypercall
        m.bookkeeping += c.bookkeeping
        m.validation += validation_cost
        m.iommu_update += upd
        m.flush_op += fl
        step = c.hypercall + c.bookkeeping + validation_cost + upd + fl
        return TransitionOutcome(True, None, dma, updates, flushes, step, validation_cost, references)

    def batch_transition(self, frames: Iterable[int], target: TypeState) -> TransitionOutcome:
        """Move several frames to ``target`` inside one hypercall.

        IOMMU permissions are rewritten per frame, then the IOTLB is flushed
        once for the whole batch (per page under page-selective
        invalidation). Any failing frame aborts the batch with nothing
        changed.
        """
        frames = list(frames)
        if len(set(frames)) != len(frames):
            raise ValueError("batch lists a frame more than once")
        if not frames:
            return TransitionOutcome()
        ft = self.frames
        sources = {self._precheck(f, target) for f in frames}
        if len(sources) != 1:
            raise self._reject(EdgeNotAllowed, "batch frames do not share one source state")
        (source,) = sources

        validation_cost = references = 0
        level = _LEVEL_OF.get(target)
        src_level = _LEVEL_OF.get(source)
        if level is not None:
            taken_all: list[list[int]] = []
            batch = set(frames)
            try:
                for f in frames:
                    cost, taken = self._validate_contents(f, level, batch)
                    validation_cost += cost
                    taken_all.append(taken)
            except ContentInvalid:
                for taken in taken_all:
                    for t in taken:
                        ft.put_ref(t)
                raise
            references = sum(len(t) for t in taken_all)
        elif src_level is not None:
            for f in frames:
                if ft.is_validated(f):
                    cost, dropped = self._devalidate_contents(f, src_level)
                    validation_cost += cost
                    references += dropped
        return self._commit(frames, source, target, validation_cost, references)

    def _commit(
        self,
        frames: list[int],
        source: TypeState,
        target: TypeState,
        validation_cost: int,
        references: int,
    ) -> TransitionOutcome:
        """DMA half of the validation, then the type-word rewrite and metering."""
        # no self-edges exist, so the edge crosses the DMA boundary iff one end is W
        dma = source == W or target == W
        updates = flushes = 0
        if dma:
            perms = perms_for_type(target)
            for f in frames:
                updates += self.iommu.set_frame_dma_perms(f, perms)
            flushes = self._flush_for(frames)
        word = _WORD_FOR[target]
        for f in frames:
            self.frames.set_word(f, word, checked=True)
        if self.history is not None:
            self.history.extend((f, source, target, self.mode) for f in frames)
        return self._charge(len(frames), dma, updates, flushes, validation_cost, references)

    def _charge(
        self, n: int, dma: bool, updates: int, flushes: int, validation_cost: int, references: int
    ) -> TransitionOutcome:
        c = self.costs
        m = self.meter
        book = c.bookkeeping * n
        upd = updates * c.iommu_update
        fl = flushes * c.flush_op
        m.hypercall += c.hypercall
        m.bookkeeping += book
        m.validation += validation_cost
        m.iommu_update += upd
        m.flush_op += fl
        step = c.hypercall + book + validation_cost + upd + fl
        return TransitionOutcome(True, None, dma, updates, flushes, step, validation_cost, references)

    def _flush_for(self, frames: list[int]) -> int:
        iommu = self.iommu
        scheme = self.scheme
        if scheme is InvalidationScheme.GLOBAL:
            iommu.flush(scheme)
            return 1
        if scheme is InvalidationScheme.PAGE_SELECTIVE:
            n = 0
            for f in frames:
                for d, page in iommu.keys_for_frame(f):
                    iommu.flush_page(d, page)
                    n += 1
            return n
        if scheme is InvalidationScheme.DOMAIN_SELECTIVE:
            domains: dict[int, None] = {}
            for f in frames:
                keys = iommu.keys_for_frame(f)
                if keys:
                    for d, _ in keys:
                        domains[d] = None
                else:
                    domains[self.frames.domain(f)] = None
            for d in domains:
                iommu.flush(scheme, domain=d)
            return len(domains)
        raise ValueError(f"unknown invalidation scheme {scheme!r}")

    # -- page-table contents ----------------------------------------------------

    def _validate_contents(
        self, frame: int, level: PageLevel, in_flight: set[int] | frozenset[int] = frozenset()
    ) -> tuple[int, list[int]]:
        """Take one typed reference per counted entry; all-or-nothing.

        ``in_flight`` holds frames changing type in the same call; a writable
        mapping onto one of them would survive into a page-table type.
        """
        ft = self.frames
        words = ft.words
        pool = len(words)
        entries = ft.entries(frame) or {}
        taken: list[int] = []
        child_code = _CHILD_CODE[level]
        try:
            for slot, entry in entries.items():
                target = entry.target
                if not 0 <= target < pool:
                    raise ContentInvalid(
                        f"frame {frame} slot {slot}: target {target} outside the pool", index=slot
                    )
                if child_code is None:
                    if not entry.writable:
                        continue
                    if target == frame or target in in_flight:
                        raise ContentInvalid(
                            f"frame {frame} slot {slot}: writable mapping onto frame {target} "
                            "which is changing type",
                            index=slot,
                        )
                    expected = _WRITABLE_CODE
                else:
                    if not words[target] & VALIDATED_BIT:
                        raise ContentInvalid(
                            f"frame {frame} slot {slot}: child {target} is not a validated "
                            f"{PageTypeCode(child_code).name} table",
                            index=slot,
                        )
                    expected = child_code
                # try_get_ref, inlined: this loop runs once per present entry
                raw = words[target]
                if raw >> TYPE_SHIFT != expected or raw & REFCOUNT_MASK == MAX_REFCOUNT:
                    try:
                        ft.try_get_ref(target, expected)
                    except (TypeMismatch, RefcountOverflow) as exc:
                        raise ContentInvalid(
                            f"frame {frame} slot {slot}: {exc}", index=slot
                        ) from exc
                words[target] = raw + 1
                taken.append(target)
        except ContentInvalid as exc:
            for t in taken:
                ft.put_ref(t)
            exc.outcome = TransitionOutcome(accepted=False, reject_reason=ContentInvalid.reason)
            raise
        return self.costs.validation(len(entries)), taken

    def _devalidate_contents(self, frame: int, level: PageLevel) -> tuple[int, int]:
        ft = self.frames
        words = ft.words
        entries = ft.entries(frame) or {}
        bottom = level is PageLevel.L3
        dropped = 0
        for entry in entries.values():
            if bottom and not entry.writable:
                continue
            target = entry.target
            if words[target] & REFCOUNT_MASK:
                words[target] -= 1
            else:
                ft.put_ref(target)  # raises the underflow
            dropped += 1
        ft.clear_entries(frame)
        return self.costs.validation(len(entries)), dropped

    def validate_page_table(self, frame: int, level: PageLevel) -> TransitionOutcome:
        """Validate the contents of an unvalidated page-table frame in place."""
        ft = self.frames
        if ft.state(frame) != PT_STATES[level] or ft.is_validated(frame):
            raise self._reject(
                ContentInvalid, f"frame {frame} is not an unvalidated {level.name} table"
            )
        if ft.entries(frame) is None:
            raise self._reject(ContentInvalid, f"frame {frame} has no contents")
        cost, taken = self._validate_contents(frame, level)
        ft.set_validated(frame, True)
        self.meter.validation += cost
        return TransitionOutcome(step_cost=cost, validation_cost=cost, references=len(taken))

    def devalidate_page_table(self, frame: int, level: PageLevel) -> TransitionOutcome:
        """Drop every reference a validated table holds and clear its contents."""
        ft = self.frames
        if ft.state(frame) != PT_STATES[level] or not ft.is_validated(frame):
            raise self._reject(
                EdgeNotAllowed, f"frame {frame} is not a validated {level.name} table"
            )
        if ft.refcount(frame):
            raise self._reject(
                StillReferenced, f"frame {frame} still referenced {ft.refcount(frame)} times"
            )
        cost, dropped = self._devalidate_contents(frame, level)
        ft.set_validated(frame, False)
        self.meter.validation += cost
        return TransitionOutcome(step_cost=cost, validation_cost=cost, references=dropped)

