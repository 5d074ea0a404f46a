import itertools

import pytest

from conftest import entries, make_stack
from ptsim.errors import ContentInvalid, EdgeNotAllowed, RefCountNonZero, StillReferenced
from ptsim.frame_table import ALL_STATES, O, PT1, PT2, PT3, PageLevel, PageTypeCode, S, W
from ptsim.iommu import NO_ACCESS, RW, InvalidationScheme
from ptsim.type_guard import ValidationMode, allowed_edges, dma_accessible

COARSE = ValidationMode.COARSE
FINE = ValidationMode.FINE_GRAINED
PTS = (PT1, PT2, PT3)


def policy_table(mode):
    """Brute-force enumeration of every ordered pair, filtered by the written policy."""
    out = set()
    for a, b in itertools.product(ALL_STATES, repeat=2):
        if a == b:
            continue
        pair = {a, b}
        if pair == {W, O}:
            out.add((a, b))
        elif mode is COARSE and W in pair and pair & set(PTS):
            out.add((a, b))
        elif mode is FINE and (pair == {W, S} or (S in pair and pair & set(PTS))):
            out.add((a, b))
    return out


@pytest.mark.parametrize("mode", [COARSE, FINE])
def test_edge_set_matches_policy_oracle(mode):
    assert set(allowed_edges(mode)) == policy_table(mode)


def test_edge_examples():
    assert (W, PT3) in allowed_edges(COARSE)
    assert (S, PT3) in allowed_edges(FINE)
    assert (W, PT3) not in allowed_edges(FINE)
    for mode in (COARSE, FINE):
        assert all(a != b for a, b in allowed_edges(mode))
    # hand-counted sizes: coarse 2*(3+1), fine 2*(1+3+1)
    assert len(allowed_edges(COARSE)) == 8
    assert len(allowed_edges(FINE)) == 10


def test_fine_w_to_s_flushes():
    st = make_stack(mode=FINE)
    out = st.guard.request_transition(3, S)
    assert out.accepted and out.dma_validation_performed
    assert out.flush_events >= 1 and out.iommu_updates == 1
    assert st.iommu.mapping(0, 3)[1] == NO_ACCESS


def test_fine_s_to_pt_skips_dma():
    st = make_stack(mode=FINE)
    st.guard.request_transition(3, S)
    st.frames.write_entries(3, PageLevel.L3, entries(10, 11))
    before = st.iommu.counters.flushes_total
    out = st.guard.request_transition(3, PT3)
    assert out.accepted and not out.dma_validation_performed
    assert out.iommu_updates == 0 and out.flush_events == 0
    assert st.iommu.counters.flushes_total == before
    assert st.frames.refcount(10) == st.frames.refcount(11) == 1


def test_fine_w_to_pt_rejected_and_unchanged():
    st = make_stack(mode=FINE)
    word = st.frames.word(3)
    with pytest.raises(EdgeNotAllowed) as info:
        st.guard.request_transition(3, PT3)
    assert info.value.outcome.accepted is False
    assert info.value.outcome.flush_events == 0
    assert st.frames.word(3) == word


@pytest.mark.parametrize("mode", [COARSE, FINE])
def test_refcount_nonzero_rejected(mode):
    st = make_stack(mode=mode)
    st.frames.try_get_ref(4, PageTypeCode.WRITABLE)
    st.frames.try_get_ref(4, PageTypeCode.WRITABLE)
    for target in (S, PT3, O):
        if (W, target) not in allowed_edges(mode):
            continue
        with pytest.raises(RefCountNonZero):
            st.guard.request_transition(4, target)
    assert st.frames.refcount(4) == 2 and st.frames.state(4) == W


def test_coarse_w_to_pt_costs():
    st = make_stack()
    st.frames.write_entries(2, PageLevel.L3, entries(20, 21, 22))
    out = st.guard.request_transition(2, PT3)
    c = st.guard.costs
    assert out.dma_validation_performed and out.flush_events == 1 and out.iommu_updates == 1
    assert out.validation_cost == c.validation_base + 3 * c.validation_entry
    assert out.step_cost == (
        c.hypercall + c.bookkeeping + out.validation_cost + c.iommu_update + c.flush_op
    )
    assert st.meter.total == out.step_cost


def test_leaving_pt_devalidates_and_drops_refs():
    st = make_stack()
    st.frames.write_entries(2, PageLevel.L3, entries(20, 21))
    st.guard.request_transition(2, PT3)
    out = st.guard.request_transition(2, W)
    assert out.references == 2
    assert st.frames.refcount(20) == 0 and st.frames.entries(2) is None
    assert st.frames.state(2) == W and not st.frames.is_validated(2)
    assert st.iommu.mapping(0, 2)[1] == RW


def test_l2_entry_to_validated_l3_takes_ref():
    st = make_stack()
    st.guard.request_transition(5, PT3)
    st.frames.write_entries(6, PageLevel.L2, entries(5))
    st.guard.request_transition(6, PT2)
    assert st.frames.refcount(5) == 1
    # L3 now referenced: it cannot change type
    with pytest.raises(RefCountNonZero):
        st.guard.request_transition(5, W)


def test_l3_writable_entry_to_page_table_rejected():
    st = make_stack()
    st.frames.write_entries(7, PageLevel.L2, {})
    st.guard.request_transition(7, PT2)
    st.frames.write_entries(8, PageLevel.L3, entries(30, 7))
    words = list(st.frames.words)
    with pytest.raises(ContentInvalid) as info:
        st.guard.request_transition(8, PT3)
    assert info.value.index == 1
    assert st.frames.words == words  # rollback of the ref on frame 30


def test_l3_read_only_entry_to_page_table_is_fine():
    st = make_stack()
    st.guard.request_transition(7, PT2)
    st.frames.write_entries(8, PageLevel.L3, entries(7, writable=False))
    out = st.guard.request_transition(8, PT3)
    assert out.references == 0 and st.frames.refcount(7) == 0


def test_l3_writable_entry_to_s_is_allowed():
    st = make_stack(mode=FINE)
    st.guard.request_transition(9, S)
    st.guard.request_transition(10, S)
    st.frames.write_entries(10, PageLevel.L3, entries(9))
    st.guard.request_transition(10, PT3)
    assert st.frames.refcount(9) == 1


def test_l3_writable_self_mapping_rejected():
    st = make_stack()
    st.frames.write_entries(8, PageLevel.L3, entries(8))
    with pytest.raises(ContentInvalid):
        st.guard.request_transition(8, PT3)


def test_l1_child_must_be_validated_l2():
    st = make_stack()
    st.guard.request_transition(5, PT3)
    st.frames.write_entries(6, PageLevel.L1, entries(5))
    with pytest.raises(ContentInvalid):
        st.guard.request_transition(6, PT1)
    assert st.frames.refcount(5) == 0


def test_empty_table_validates_vacuously():
    st = make_stack()
    for level, state in zip(PageLevel, (PT1, PT2, PT3)):
        frame = 10 + level
        st.frames.write_entries(frame, level, {})
        out = st.guard.request_transition(frame, state)
        assert out.references == 0


def test_validate_page_table_in_place():
    st = make_stack()
    st.guard.request_transition(5, PT3)
    st.frames.write_entries(6, PageLevel.L2, entries(5))
    st.frames.set_type(6, PT2, validated=False)
    out = st.guard.validate_page_table(6, PageLevel.L2)
    assert out.references == 1 and st.frames.is_validated(6)
    assert st.frames.refcount(5) == 1
    with pytest.raises(ContentInvalid):
        st.guard.validate_page_table(6, PageLevel.L2)  # already validated


def test_devalidate_page_table():
    st = make_stack()
    for f in (1, 2):
        st.frames.write_entries(f, PageLevel.L2, {})
        st.guard.request_transition(f, PT2)
    st.frames.write_entries(3, PageLevel.L1, entries(1, 2))
    st.guard.request_transition(3, PT1)
    out = st.guard.devalidate_page_table(3, PageLevel.L1)
    assert out.references == 2
    assert st.frames.refcount(1) == st.frames.refcount(2) == 0
    assert not st.frames.is_validated(3) and st.frames.entries(3) is None


def test_devalidate_still_referenced():
    st = make_stack()
    st.guard.request_transition(5, PT3)
    st.frames.write_entries(6, PageLevel.L2, entries(5))
    st.guard.request_transition(6, PT2)
    with pytest.raises(StillReferenced):
        st.guard.devalidate_page_table(5, PageLevel.L3)


def test_devalidate_empty_table():
    st = make_stack()
    st.guard.request_transition(5, PT3)
    assert st.guard.devalidate_page_table(5, PageLevel.L3).references == 0


def _ten_s_frames(scheme):
    st = make_stack(mode=FINE, scheme=scheme)
    frames = list(range(10))
    st.guard.batch_transition(frames, S)
    return st, frames


def test_batch_domain_selective_one_flush():
    st, frames = _ten_s_frames(InvalidationScheme.DOMAIN_SELECTIVE)
    out = st.guard.batch_transition(frames, W)
    assert out.flush_events == 1 and out.iommu_updates == 10


def test_batch_page_selective_flush_per_frame():
    st, frames = _ten_s_frames(InvalidationScheme.PAGE_SELECTIVE)
    out = st.guard.batch_transition(frames, W)
    assert out.flush_events == 10


def test_batch_global_one_flush():
    st, frames = _ten_s_frames(InvalidationScheme.GLOBAL)
    assert st.guard.batch_transition(frames, W).flush_events == 1


def test_batch_single_hypercall_cost():
    st, frames = _ten_s_frames(InvalidationScheme.DOMAIN_SELECTIVE)
    c = st.guard.costs
    out = st.guard.batch_transition(frames, W)
    assert out.step_cost == (
        c.hypercall + 10 * c.bookkeeping + 10 * c.iommu_update + 1 * c.flush_op
    )


def test_batch_atomic_on_refcount():
    st, frames = _ten_s_frames(InvalidationScheme.PAGE_SELECTIVE)
    st.frames.words[4] += 1  # one S frame holds a reference
    words = list(st.frames.words)
    flushes = st.iommu.counters.flushes_total
    with pytest.raises(RefCountNonZero):
        st.guard.batch_transition(frames, W)
    assert st.frames.words == words
    assert st.iommu.counters.flushes_total == flushes


def test_batch_rolls_back_validation():
    st = make_stack(mode=FINE)
    st.guard.batch_transition([1, 2, 3], S)
    st.frames.write_entries(1, PageLevel.L3, entries(40))
    st.frames.write_entries(2, PageLevel.L3, entries(41, 2))  # writable self-mapping
    words = list(st.frames.words)
    with pytest.raises(ContentInvalid):
        st.guard.batch_transition([1, 2, 3], PT3)
    assert st.frames.words == words


def test_batch_rejects_mapping_onto_batch_member():
    st = make_stack(mode=FINE)
    st.guard.batch_transition([1, 2], S)
    st.frames.write_entries(1, PageLevel.L3, entries(2))
    with pytest.raises(ContentInvalid):
        st.guard.batch_transition([1, 2], PT3)


def test_batch_mixed_sources_and_duplicates():
    st = make_stack(mode=FINE)
    st.guard.request_transition(1, S)
    with pytest.raises(EdgeNotAllowed):
        st.guard.batch_transition([1, 2], PT3)
    with pytest.raises(ValueError):
        st.guard.batch_transition([1, 1], PT3)
    assert st.guard.batch_transition([], S).flush_events == 0


def test_dma_validation_iff_accessibility_changes():
    for mode in (COARSE, FINE):
        for a, b in allowed_edges(mode):
            st = make_stack(mode=mode)
            f = 5
            if a != W:
                path = [S] if a == S else ([S, a] if mode is FINE and a in PTS else [a])
                for step in path:
                    st.guard.request_transition(f, step)
            out = st.guard.request_transition(f, b)
            assert out.dma_validation_performed == (dma_accessible(a) != dma_accessible(b))


def test_history_has_no_direct_w_pt_in_fine_mode():
    st = make_stack(mode=FINE, keep_history=True)
    st.guard.request_transition(1, S)
    st.guard.request_transition(1, PT3)
    st.guard.request_transition(1, S)
    st.guard.request_transition(1, W)
    for _, src, dst, mode in st.guard.history:
        assert {src, dst} & {W} == set() or {src, dst} <= {W, S, O}
