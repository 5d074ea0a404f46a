import pytest

from ptsim.errors import (
    InvalidCombination,
    MalformedWord,
    RefcountOverflow,
    RefcountUnderflow,
    TypeMismatch,
)
from ptsim.frame_table import (
    MAX_REFCOUNT,
    PT3,
    FrameTable,
    PageLevel,
    PageTypeCode,
    PtEntry,
    S,
    W,
    decode_type_word,
    encode_type_word,
)

WR = PageTypeCode.WRITABLE
L1 = PageTypeCode.L1_PAGE_TABLE
L2 = PageTypeCode.L2_PAGE_TABLE


def oracle_pack(code: int, validated: bool, semi: bool, refcount: int) -> int:
    # written from the bit layout alone, independent of the codec
    return code * 2**28 + validated * 2**26 + semi * 2**22 + refcount


def test_encode_examples():
    assert encode_type_word(WR, False, True, 3) == 0x10400003
    assert encode_type_word(L1, True, False, 0) == 0x24000000
    assert oracle_pack(1, False, True, 3) == 0x10400003


def test_encode_rejects_overflow_and_bad_flags():
    with pytest.raises(RefcountOverflow):
        encode_type_word(WR, False, False, 4194304)
    with pytest.raises(InvalidCombination):
        encode_type_word(L2, False, True, 0)
    with pytest.raises(InvalidCombination):
        encode_type_word(WR, True, False, 0)
    with pytest.raises(InvalidCombination):
        encode_type_word(WR, False, False, -1)


def test_decode_examples():
    assert decode_type_word(0x10400003) == (WR, False, True, 3)
    assert decode_type_word(0x24000000) == (L1, True, False, 0)


@pytest.mark.parametrize(
    "raw",
    [
        0x08000000,  # bit 27
        0x10800000,  # bit 23
        0x00000000,  # code 0 is not a live type
        0x60000000,  # undefined code 6
        0x30400000,  # semi on an L2 code
        0x14000000,  # validated on writable
        1 << 32,
    ],
)
def test_decode_rejects_malformed(raw):
    with pytest.raises(MalformedWord):
        decode_type_word(raw)


def test_max_refcount_constant():
    assert MAX_REFCOUNT == 2**22 - 1 == 4194303


def test_try_get_ref_and_put_ref():
    ft = FrameTable(8)
    assert ft.try_get_ref(0, WR) == 1
    assert ft.put_ref(0) == 0
    with pytest.raises(RefcountUnderflow):
        ft.put_ref(0)
    ft.set_word(1, encode_type_word(L2, True, False, 0))
    with pytest.raises(TypeMismatch):
        ft.try_get_ref(1, WR)
    ft.set_word(2, encode_type_word(WR, False, False, MAX_REFCOUNT))
    with pytest.raises(RefcountOverflow):
        ft.try_get_ref(2, WR)
    assert ft.refcount(2) == MAX_REFCOUNT
    assert ft.put_ref(2) == MAX_REFCOUNT - 1


def test_state_and_counts_track_word_writes():
    ft = FrameTable(4)
    assert ft.state(0) == W and ft.count(WR) == 4
    ft.set_type(0, S)
    ft.set_type(1, PT3, validated=True)
    assert ft.state(0) == S
    assert ft.state(1) == PT3 and ft.is_validated(1)
    assert ft.count(WR) == 3 and ft.count(PageTypeCode.L3_PAGE_TABLE) == 1
    assert ft.audit() == []


def test_set_word_validates_unless_checked():
    ft = FrameTable(2)
    with pytest.raises(MalformedWord):
        ft.set_word(0, 0x08000000)
    assert ft.word(0) == encode_type_word(WR, False, False, 0)
    with pytest.raises(IndexError):
        ft.set_word(5, encode_type_word(WR, False, False, 0))


def test_audit_flags_corrupted_word():
    ft = FrameTable(3)
    ft.words[2] = 0x18000000  # reserved bit 27 on writable
    problems = ft.audit()
    assert any("reserved" in p for p in problems)


def test_write_entries_only_on_writable_frames():
    ft = FrameTable(8)
    ft.write_entries(0, PageLevel.L3, {0: PtEntry(True, 5, True), 3: PtEntry(False, 9, True)})
    assert ft.entries(0) == {0: PtEntry(True, 5, True)}  # non-present entry dropped
    with pytest.raises(IndexError):
        ft.write_entries(1, PageLevel.L1, {4: PtEntry(True, 5, True)})  # L1 has 4 slots
    ft.set_type(2, PT3, validated=True)
    with pytest.raises(TypeMismatch):
        ft.write_entries(2, PageLevel.L3, {})
    ft.clear_entries(0)
    assert ft.entries(0) is None


def test_levels():
    assert PageLevel.L1.code == L1
    assert PageLevel.L1.child is PageLevel.L2
    assert PageLevel.L3.child is None
    assert PageLevel.of_code(PageTypeCode.L3_PAGE_TABLE) is PageLevel.L3
    assert str(S) == "S" and str(PT3) == "PT3"
