"""Lexicographically ordered probability and frequency tables.

A table holds a flat float array over an ordered tuple of variables;
categories of later-listed variables run fastest, so the flat layout is
row-major over the per-variable category counts.  Rearrangements
(reordering, expansion, marginalization) run through flat index maps
built once and cached, so repeated use inside the EM loop reduces to
array gathers followed by a single fixed-tree reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def lex_index(levels, cell) -> int:
    """Flat position of ``cell`` in a table over ``levels`` (last variable fastest)."""
    if len(levels) != len(cell):
        raise ValueError(f"cell has {len(cell)} coordinates for {len(levels)} variables")
    flat = 0
    for lv, z in zip(levels, cell):
        z = int(z)
        if not 0 <= z < lv:
            raise ValueError(f"coordinate {z} out of range for a {lv}-category variable")
        flat = flat * lv + z
    return flat


def lex_cell(levels, flat: int) -> tuple[int, ...]:
    """Inverse of :func:`lex_index`."""
    cell = []
    for lv in reversed(levels):
        cell.append(flat % lv)
        flat //= lv
    return tuple(reversed(cell))


@dataclass(frozen=True)
class LexTable:
    """Immutable flat array over an ordered variable tuple."""

    vars: tuple[int, ...]
    levels: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(int(v) for v in self.vars))
        object.__setattr__(self, "levels", tuple(int(lv) for lv in self.levels))
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.shape != (int(np.prod(self.levels, dtype=np.int64)),):
            raise ValueError(
                f"values length {values.size} does not match level product "
                f"{int(np.prod(self.levels, dtype=np.int64))}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    def level_of(self, var: int) -> int:
        return self.levels[self.vars.index(var)]

    def total(self) -> float:
        return float(np.sum(self.values))

    def __getitem__(self, cell) -> float:
        return float(self.values[lex_index(self.levels, cell)])

    def as_tensor(self) -> np.ndarray:
        return self.values.reshape(self.levels)


@dataclass(frozen=True)
class IndexMap:
    """Flat gather map taking a source table onto a target variable order.

    ``target.values = source.values[indices]``.  Permutation maps carry
    an inverse; expansion (replication) maps do not.
    """

    from_vars: tuple[int, ...]
    to_vars: tuple[int, ...]
    to_levels: tuple[int, ...]
    indices: np.ndarray
    is_permutation: bool

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.indices]

    def inverse(self) -> "IndexMap":
        if not self.is_permutation:
            raise ValueError("expansion maps have no inverse")
        level_of = dict(zip(self.to_vars, self.to_levels))
        from_levels = tuple(level_of[v] for v in self.from_vars)
        inv = np.empty_like(self.indices)
        inv[self.indices] = np.arange(self.indices.size, dtype=self.indices.dtype)
        return IndexMap(self.to_vars, self.from_vars, from_levels, inv, True)


@lru_cache(maxsize=1024)
def build_index_map(from_vars: tuple, to_vars: tuple, to_levels: tuple) -> IndexMap:
    """Map from a table over ``from_vars`` onto the order ``to_vars``.

    ``to_vars`` must be a permutation or a superset of ``from_vars``;
    ``to_levels`` is aligned with ``to_vars``.  Cached per argument
    triple, so repeated table rearrangements are pure gathers.
    """
    from_vars = tuple(from_vars)
    to_vars = tuple(to_vars)
    to_levels = tuple(int(lv) for lv in to_levels)
    if len(to_vars) != len(to_levels):
        raise ValueError("to_levels must align with to_vars")
    if len(set(to_vars)) != len(to_vars) or len(set(from_vars)) != len(from_vars):
        raise ValueError("variable lists must not repeat")
    if not set(from_vars) <= set(to_vars):
        raise ValueError(f"incompatible variable sets: {from_vars} is not within {to_vars}")

    level_of = dict(zip(to_vars, to_levels))
    from_levels = [level_of[v] for v in from_vars]
    n_target = int(np.prod(to_levels, dtype=np.int64)) if to_levels else 1

    src_strides = {}
    stride = 1
    for v, lv in zip(reversed(from_vars), reversed(from_levels)):
        src_strides[v] = stride
        stride *= lv

    dtype = np.int32 if n_target < 2**31 else np.int64
    flat = np.zeros(n_target, dtype=dtype)
    pos_arange = np.arange(n_target, dtype=dtype)
    to_stride = 1
    for v, lv in zip(reversed(to_vars), reversed(to_levels)):
        if v in src_strides:
            coord = (pos_arange // to_stride) % lv
            flat += coord * dtype(src_strides[v])
        to_stride *= lv
    flat.setflags(write=False)
    return IndexMap(from_vars, to_vars, to_levels, flat, set(from_vars) == set(to_vars))


def expand(t: LexTable, target_vars, target_levels=None) -> LexTable:
    """Replicate ``t`` onto a superset (or reordering) of its variables.

    Every target cell takes the source value at the cell's projection
    onto ``t.vars``.
    """
    target_vars = tuple(int(v) for v in target_vars)
    if target_levels is None:
        level_of = dict(zip(t.vars, t.levels))
        try:
            target_levels = tuple(level_of[v] for v in target_vars)
        except KeyError as exc:
            raise ValueError(f"missing level for new variable {exc.args[0]}") from exc
    target_levels = tuple(int(lv) for lv in target_levels)
    level_of = dict(zip(target_vars, target_levels))
    for v, lv in zip(t.vars, t.levels):
        if v in level_of and level_of[v] != lv:
            raise ValueError(f"inconsistent levels for shared variable {v}")
    imap = build_index_map(t.vars, target_vars, target_levels)
    return LexTable(target_vars, target_levels, imap.apply(t.values))


def marginalize(t: LexTable, keep) -> LexTable:
    """Sum out every variable not in ``keep``; kept variables preserve
    their original relative order, and total mass is preserved."""
    keep = set(int(v) for v in keep)
    if not keep <= set(t.vars):
        raise ValueError(f"keep contains variables not in the table: {sorted(keep - set(t.vars))}")
    kept = tuple(v for v in t.vars if v in keep)
    dropped = tuple(v for v in t.vars if v not in keep)
    if not dropped:
        return t
    level_of = dict(zip(t.vars, t.levels))
    order = kept + dropped
    order_levels = tuple(level_of[v] for v in order)
    imap = build_index_map(t.vars, order, order_levels)
    n_keep = int(np.prod([level_of[v] for v in kept], dtype=np.int64)) if kept else 1
    rearranged = imap.apply(t.values).reshape(n_keep, -1)
    summed = np.sum(rearranged, axis=1)
    return LexTable(kept, tuple(level_of[v] for v in kept), summed)


def condition(t: LexTable, assignments: dict) -> LexTable:
    """Slice the table at fixed categories for a subset of its variables."""
    for v, z in assignments.items():
        if v not in t.vars:
            raise ValueError(f"variable {v} not in table")
        if not 0 <= int(z) < t.level_of(v):
            raise ValueError(f"category {z} out of range for variable {v}")
    selector = tuple(
        int(assignments[v]) if v in assignments else slice(None) for v in t.vars
    )
    remaining = tuple(v for v in t.vars if v not in assignments)
    remaining_levels = tuple(lv for v, lv in zip(t.vars, t.levels) if v not in assignments)
    sub = np.ascontiguousarray(t.as_tensor()[selector])
    return LexTable(remaining, remaining_levels, sub.reshape(-1))


def table_to_csv(t: LexTable, path_or_file) -> None:
    """Debug dump: one row per cell, coordinate columns then the value."""
    header = ",".join(f"z{v}" for v in t.vars) + ",value"
    lines = [header]
    for flat in range(t.size):
        cell = lex_cell(t.levels, flat)
        lines.append(",".join(str(z) for z in cell) + f",{t.values[flat]!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", encoding="utf-8") as fh:
            fh.write(text)


def mass_error_budget(n_entries: int) -> float:
    """Mass-preservation tolerance: 1e-12 per million summed entries."""
    return 1e-12 * max(1.0, n_entries / 1e6)
