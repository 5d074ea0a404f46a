"""Physical frame pool with packed 32-bit page-type words.

Type word layout (bit 31 is the most significant)::

    31..28  type code
    27      reserved
    26      validated
    25..23  reserved
    22      semi-writable
    21..0   typed reference count

Every frame carries exactly one type code at all times. Frames that are
neither page tables nor descriptor pages are ``WRITABLE``, including the
ones sitting in the guest's free lists.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Iterator, NamedTuple

from ptsim.errors import (
    InvalidCombination,
    MalformedWord,
    RefcountOverflow,
    RefcountUnderflow,
    TypeMismatch,
)

FRAME_SIZE = 4096

TYPE_SHIFT = 28
VALIDATED_BIT = 1 << 26
SEMI_BIT = 1 << 22
RESERVED_MASK = (1 << 27) | (0b111 << 23)
REFCOUNT_MASK = (1 << 22) - 1
MAX_REFCOUNT = REFCOUNT_MASK  # 4194303


class PageTypeCode(IntEnum):
    WRITABLE = 1
    L1_PAGE_TABLE = 2
    L2_PAGE_TABLE = 3
    L3_PAGE_TABLE = 4
    OTHER_NON_WRITABLE = 5


PAGE_TABLE_CODES = frozenset(
    {PageTypeCode.L1_PAGE_TABLE, PageTypeCode.L2_PAGE_TABLE, PageTypeCode.L3_PAGE_TABLE}
)
_VALID_CODES = frozenset(int(c) for c in PageTypeCode)


class PageLevel(IntEnum):
    """PAE paging levels; L1 is the top (PGD), L3 the bottom (PTE)."""

    L1 = 1
    L2 = 2
    L3 = 3

    @property
    def code(self) -> PageTypeCode:
        return PageTypeCode(self.value + 1)

    @property
    def child(self) -> PageLevel | None:
        return PageLevel(self.value + 1) if self.value < 3 else None

    @classmethod
    def of_code(cls, code: int) -> PageLevel:
        return cls(int(code) - 1)


class TypeState(NamedTuple):
    """Node of the page-type transition graph."""

    code: PageTypeCode
    semi: bool = False

    @property
    def is_page_table(self) -> bool:
        return self.code in PAGE_TABLE_CODES

    @property
    def level(self) -> PageLevel | None:
        return PageLevel.of_code(self.code) if self.code in PAGE_TABLE_CODES else None

    def __str__(self) -> str:
        return _STATE_NAMES[self]


W = TypeState(PageTypeCode.WRITABLE, False)
S = TypeState(PageTypeCode.WRITABLE, True)
PT1 = TypeState(PageTypeCode.L1_PAGE_TABLE)
PT2 = TypeState(PageTypeCode.L2_PAGE_TABLE)
PT3 = TypeState(PageTypeCode.L3_PAGE_TABLE)
O = TypeState(PageTypeCode.OTHER_NON_WRITABLE)  # noqa: E741
PT_STATES = {PageLevel.L1: PT1, PageLevel.L2: PT2, PageLevel.L3: PT3}
ALL_STATES = (W, S, PT1, PT2, PT3, O)
_STATE_NAMES = {W: "W", S: "S", PT1: "PT1", PT2: "PT2", PT3: "PT3", O: "O"}
# indexed by (code << 1) | semi; avoids building enums on the hot path
_STATE_BY_INDEX: list[TypeState | None] = [None] * 32
for _st in ALL_STATES:
    _STATE_BY_INDEX[(int(_st.code) << 1) | _st.semi] = _st


class PtEntry(NamedTuple):
    present: bool
    target: int
    writable: bool


class DecodedWord(NamedTuple):
    code: PageTypeCode
    validated: bool
    semi: bool
    refcount: int


def encode_type_word(code: PageTypeCode, validated: bool, semi: bool, refcount: int) -> int:
    """Pack the four components into a 32-bit type word."""
    if refcount < 0:
        raise InvalidCombination(f"negative refcount {refcount}")
    if refcount > MAX_REFCOUNT:
        raise RefcountOverflow(f"refcount {refcount} exceeds {MAX_REFCOUNT}")
    if int(code) not in _VALID_CODES:
        raise InvalidCombination(f"undefined type code {code!r}")
    if semi and code != PageTypeCode.WRITABLE:
        raise InvalidCombination("semi-writable flag requires the writable code")
    if validated and code not in PAGE_TABLE_CODES:
        raise InvalidCombination("validated flag requires a page-table code")
    word = (int(code) << TYPE_SHIFT) | refcount
    if validated:
        word |= VALIDATED_BIT
    if semi:
        word |= SEMI_BIT
    return word


def decode_type_word(raw: int) -> DecodedWord:
    """Inverse of :func:`encode_type_word`; rejects reserved bits and bad codes."""
    if raw < 0 or raw >> 32:
        raise MalformedWord(f"{raw:#x} is not a 32-bit word")
    if raw & RESERVED_MASK:
        raise MalformedWord(f"reserved bits set in {raw:#010x}")
    code = raw >> TYPE_SHIFT
    if code not in _VALID_CODES:
        raise MalformedWord(f"undefined type code {code} in {raw:#010x}")
    validated = bool(raw & VALIDATED_BIT)
    semi = bool(raw & SEMI_BIT)
    decoded = DecodedWord(PageTypeCode(code), validated, semi, raw & REFCOUNT_MASK)
    if semi and code != PageTypeCode.WRITABLE:
        raise MalformedWord(f"semi flag on non-writable code in {raw:#010x}")
    if validated and code not in PAGE_TABLE_CODES:
        raise MalformedWord(f"validated flag on non-page-table code in {raw:#010x}")
    return decoded


DEFAULT_ENTRIES_PER_LEVEL = {PageLevel.L1: 4, PageLevel.L2: 512, PageLevel.L3: 512}


class FrameTable:
    """Type words, owners and page-table contents for a fixed frame pool.

    Page-table contents are stored sparsely as ``{slot: PtEntry}`` holding
    only present entries; an absent slot is a non-present entry. Contents
    are staged by the guest while the frame is still software-writable and
    consumed by validation when it is promoted to a page-table type.
    """

    def __init__(
        self,
        pool_size: int,
        entries_per_level: dict[PageLevel, int] | None = None,
        domain: int = 0,
    ) -> None:
        if pool_size <= 0:
            raise ValueError("pool_size must be positive")
        self.pool_size = pool_size
        self.entries_per_level = dict(entries_per_level or DEFAULT_ENTRIES_PER_LEVEL)
        writable = encode_type_word(PageTypeCode.WRITABLE, False, False, 0)
        # raw words; read freely, write only through the methods below
        self.words = [writable] * pool_size
        self._domains = [domain] * pool_size
        self._entries: list[dict[int, PtEntry] | None] = [None] * pool_size
        self._count_by_code = {int(c): 0 for c in PageTypeCode}
        self._count_by_code[int(PageTypeCode.WRITABLE)] = pool_size

    def __len__(self) -> int:
        return self.pool_size

    def _check(self, frame: int) -> None:
        if not 0 <= frame < self.pool_size:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")

    # -- type word access -------------------------------------------------

    def word(self, frame: int) -> int:
        if frame < 0:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")
        return self.words[frame]

    def decode(self, frame: int) -> DecodedWord:
        return decode_type_word(self.word(frame))

    def state(self, frame: int) -> TypeState:
        raw = self.word(frame)
        return _STATE_BY_INDEX[(raw >> 27) & ~1 | (raw >> 22) & 1]

    def refcount(self, frame: int) -> int:
        return self.word(frame) & REFCOUNT_MASK

    def is_validated(self, frame: int) -> bool:
        return bool(self.word(frame) & VALIDATED_BIT)

    def domain(self, frame: int) -> int:
        self._check(frame)
        return self._domains[frame]

    def set_word(self, frame: int, word: int, checked: bool = False) -> None:
        """Rewrite a frame's type word in one step.

        The word is decoded first to enforce the flag rules unless the
        caller built it with :func:`encode_type_word` (``checked=True``).
        """
        if not 0 <= frame < self.pool_size:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")
        if not checked:
            decode_type_word(word)
        words = self.words
        counts = self._count_by_code
        counts[words[frame] >> TYPE_SHIFT] -= 1
        counts[word >> TYPE_SHIFT] += 1
        words[frame] = word

    def set_type(self, frame: int, state: TypeState, validated: bool = False) -> None:
        """Change type keeping the current refcount."""
        self.set_word(
            frame, encode_type_word(state.code, validated, state.semi, self.refcount(frame))
        )

    def set_validated(self, frame: int, validated: bool) -> None:
        raw = self.word(frame)
        raw = raw | VALIDATED_BIT if validated else raw & ~VALIDATED_BIT
        self.set_word(frame, raw)

    def count(self, code: PageTypeCode) -> int:
        return self._count_by_code[int(code)]

    # -- typed reference counting -----------------------------------------

    def try_get_ref(self, frame: int, expected: PageTypeCode) -> int:
        """Take a typed reference; fails unless the frame holds ``expected``."""
        if frame < 0:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")
        raw = self.words[frame]
        if raw >> TYPE_SHIFT != int(expected):
            raise TypeMismatch(
                f"frame {frame} is {PageTypeCode(raw >> TYPE_SHIFT).name}, "
                f"expected {PageTypeCode(expected).name}"
            )
        count = raw & REFCOUNT_MASK
        if count >= MAX_REFCOUNT:
            raise RefcountOverflow(f"frame {frame} refcount at cap {MAX_REFCOUNT}")
        self.words[frame] = raw + 1
        return count + 1

    def put_ref(self, frame: int) -> int:
        if frame < 0:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")
        raw = self.words[frame]
        count = raw & REFCOUNT_MASK
        if count == 0:
            raise RefcountUnderflow(f"frame {frame} refcount already 0")
        self.words[frame] = raw - 1
        return count - 1

    # -- page-table contents ----------------------------------------------

    def entries(self, frame: int) -> dict[int, PtEntry] | None:
        if frame < 0:
            raise IndexError(f"frame {frame} outside pool of {self.pool_size}")
        return self._entries[frame]

    def write_entries(self, frame: int, level: PageLevel, entries: dict[int, PtEntry]) -> None:
        """Stage guest-written contents for a frame about to become a page table.

        Only software-writable frames accept writes; page-table frames are
        read-only to the guest.
        """
        if self.word(frame) >> TYPE_SHIFT != PageTypeCode.WRITABLE:
            raise TypeMismatch(f"frame {frame} is {self.state(frame)}; guest cannot write it")
        size = self.entries_per_level[level]
        if entries and not 0 <= min(entries) <= max(entries) < size:
            raise IndexError(f"slot outside the {size}-entry {level.name} table")
        self._entries[frame] = {slot: e for slot, e in entries.items() if e.present}

    def clear_entries(self, frame: int) -> None:
        self._check(frame)
        self._entries[frame] = None

    # -- audit --------------------------------------------------------------

    def iter_words(self) -> Iterator[tuple[int, int]]:
        return enumerate(self.words)

    def audit(self) -> list[str]:
        """Sweep every word; return human-readable violations (empty if clean)."""
        problems = []
        counts = {int(c): 0 for c in PageTypeCode}
        for frame, raw in enumerate(self.words):
            try:
                decoded = decode_type_word(raw)
            except MalformedWord as exc:
                problems.append(f"frame {frame}: {exc}")
                continue
            counts[int(decoded.code)] += 1
            if decoded.refcount > MAX_REFCOUNT:  # pragma: no cover - masked
                problems.append(f"frame {frame}: refcount out of range")
        if counts != self._count_by_code:
            problems.append(f"per-code tallies drifted: {self._count_by_code} vs {counts}")
        return problems
