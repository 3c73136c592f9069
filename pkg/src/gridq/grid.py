"""Experiment grid expansion and merging of manually defined experiments."""

from __future__ import annotations

import itertools
from collections.abc import Iterable, Iterator, Mapping, Sequence

from gridq.config import KeyField, Value, coerce_value


class ExperimentKey(Mapping):
    """Immutable, hashable mapping of key-field name to value, in field order."""

    __slots__ = ("_items", "_index")

    def __init__(self, items: Iterable[tuple[str, Value]]):
        self._items = tuple(items)
        self._index = dict(self._items)
        if len(self._index) != len(self._items):
            raise ValueError("repeated field name in experiment key")

    @property
    def items_tuple(self) -> tuple[tuple[str, Value], ...]:
        return self._items

    def __getitem__(self, name: str) -> Value:
        return self._index[name]

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ExperimentKey):
            return self._items == other._items
        return NotImplemented

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self._items)
        return f"ExperimentKey({inner})"


def expand_grid(key_fields: Sequence[KeyField]) -> list[ExperimentKey]:
    """Cartesian product of all domains; the first field varies slowest."""
    if not key_fields:
        raise ValueError("no key fields to expand")
    for kf in key_fields:
        if not kf.domain:
            raise ValueError(f"empty domain for field {kf.name!r}")
    names = [kf.name for kf in key_fields]
    return [
        ExperimentKey(zip(names, combo))
        for combo in itertools.product(*(kf.domain for kf in key_fields))
    ]


def make_key(key_fields: Sequence[KeyField], values: Mapping[str, object]) -> ExperimentKey:
    """Build a type-checked key from a mapping. Domains are not enforced."""
    names = {kf.name for kf in key_fields}
    unknown = [k for k in values if k not in names]
    if unknown:
        raise ValueError(f"unknown key field {unknown[0]!r}")
    items = []
    for kf in key_fields:
        if kf.name not in values:
            raise ValueError(f"missing key field {kf.name!r}")
        try:
            items.append((kf.name, coerce_value(kf.type, values[kf.name])))
        except TypeError as exc:
            raise ValueError(f"key field {kf.name!r}: {exc}") from None
    return ExperimentKey(items)


def merge_manual(
    grid: Sequence[ExperimentKey],
    manual: Iterable[Mapping[str, object]],
    key_fields: Sequence[KeyField],
) -> list[ExperimentKey]:
    """Append manual experiments to ``grid``, dropping exact duplicates (first wins).

    Manual values may lie outside the declared domains but must match the
    field types. ``key_fields`` supplies the names and types to check against.
    """
    checked = [make_key(key_fields, m) for m in manual]
    seen: set[ExperimentKey] = set()
    merged = []
    for key in itertools.chain(grid, checked):
        if key not in seen:
            seen.add(key)
            merged.append(key)
    return merged
