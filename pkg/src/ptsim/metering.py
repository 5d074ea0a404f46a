"""Abstract step-cost units and the shared meter that accumulates them."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields, replace


@dataclass(frozen=True)
class CostModel:
    """Unit costs of every metered action. All values are abstract units."""

    slab_front: int = 5
    list_op: int = 1
    split: int = 1
    merge: int = 1
    validation_base: int = 2
    validation_entry: int = 1
    bookkeeping: int = 2
    hypercall: int = 5
    iommu_update: int = 1
    flush_op: int = 4
    cache_pop: int = 3
    cache_push: int = 3
    walk: int = 10

    def validation(self, present_entries: int) -> int:
        return self.validation_base + self.validation_entry * present_entries


CATEGORIES = (
    "list_ops",
    "splits",
    "merges",
    "slab_front",
    "validation",
    "bookkeeping",
    "hypercall",
    "iommu_update",
    "flush_op",
    "cache_op",
)


@dataclass
class StepMeter:
    list_ops: int = 0
    splits: int = 0
    merges: int = 0
    slab_front: int = 0
    validation: int = 0
    bookkeeping: int = 0
    hypercall: int = 0
    iommu_update: int = 0
    flush_op: int = 0
    cache_op: int = 0

    @property
    def total(self) -> int:
        return sum(astuple(self))

    def charge(self, category: str, units: int) -> int:
        setattr(self, category, getattr(self, category) + units)
        return units

    def snapshot(self) -> StepMeter:
        return replace(self)

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def as_dict(self) -> dict[str, int]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["total"] = self.total
        return out
