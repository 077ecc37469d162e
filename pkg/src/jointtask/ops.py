"""Scalar semantics of the ListOps operations over residues mod n.

These functions are the ground truth used both to generate data and to grade
model outputs.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyOperands, MissingTable, OperandOutOfRange


class OpKind(enum.Enum):
    MAX = "max"
    MIN = "min"
    MED = "med"
    ADD = "add"
    PROD = "prod"
    NADD = "nadd"
    SHUF_ADD = "sadd"

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        key = name.strip().lower()
        for kind in cls:
            if key in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown operation {name!r}")

    def token(self, modulus: int) -> str:
        return f"{self.value}_{modulus}"


@dataclass(frozen=True)
class ShuffledTable:
    """Commutative binary table whose right-hand sides are a permuted addition table."""

    modulus: int
    entries: tuple  # tuple of row tuples, entries[i][j]
    seed: int

    def __call__(self, a: int, b: int) -> int:
        return self.entries[a][b]

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=np.int64)


def make_shuffled_table(modulus: int, seed: int) -> ShuffledTable:
    if modulus < 1:
        raise ValueError("modulus must be >= 1")
    n = modulus
    rng = random.Random(seed)
    upper = [(i, j) for i in range(n) for j in range(n) if i < j]
    upper_vals = [(i + j) % n for i, j in upper]
    diag_vals = [(2 * i) % n for i in range(n)]
    # Diagonal is shuffled on its own: off-diagonal values appear twice after mirroring.
    rng.shuffle(upper_vals)
    rng.shuffle(diag_vals)
    table = [[0] * n for _ in range(n)]
    for (i, j), v in zip(upper, upper_vals):
        table[i][j] = v
        table[j][i] = v
    for i, v in enumerate(diag_vals):
        table[i][i] = v
    return ShuffledTable(n, tuple(tuple(row) for row in table), seed)


def addition_table(modulus: int) -> ShuffledTable:
    """The unshuffled table, handy as an associative reference."""
    n = modulus
    rows = tuple(tuple((i + j) % n for j in range(n)) for i in range(n))
    return ShuffledTable(n, rows, seed=-1)


def eval_op(kind: OpKind, modulus: int, operands: Sequence[int],
            table: Optional[ShuffledTable] = None) -> int:
    if len(operands) == 0:
        raise EmptyOperands(f"{kind.name} needs at least one operand")
    for x in operands:
        if not 0 <= x < modulus:
            raise OperandOutOfRange(f"operand {x} outside [0, {modulus})")
    if kind is OpKind.SHUF_ADD:
        if table is None:
            raise MissingTable("SHUF_ADD requires a shuffled table")
        acc = operands[0]
        for x in operands[1:]:
            acc = table.entries[acc][x]
        return acc
    if table is not None:
        raise MissingTable(f"a table is only accepted for SHUF_ADD, not {kind.name}")

    if kind is OpKind.MAX:
        return max(operands)
    if kind is OpKind.MIN:
        return min(operands)
    if kind is OpKind.MED:
        # lower middle for even lengths
        return sorted(operands)[(len(operands) - 1) // 2]
    if kind is OpKind.ADD:
        return sum(operands) % modulus
    if kind is OpKind.PROD:
        acc = 1
        for x in operands:
            acc = (acc * x) % modulus
        return acc % modulus
    if kind is OpKind.NADD:
        return sum(x if i % 2 == 0 else -x for i, x in enumerate(operands)) % modulus
    raise AssertionError(kind)


def associativity_violation_fraction(table: ShuffledTable, sample: int,
                                     seed: Optional[int] = 0) -> float:
    """Fraction of triples (a, b, c) where (a.b).c != a.(b.c).

    When ``sample`` is at least n**3 every triple is checked exactly once.
    """
    if sample < 1:
        raise ValueError("sample must be >= 1")
    t = table.as_array()
    n = table.modulus
    if sample >= n ** 3:
        a, b, c = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
        a, b, c = a.ravel(), b.ravel(), c.ravel()
    else:
        rng = np.random.default_rng(seed)
        a, b, c = rng.integers(0, n, size=(3, sample))
    left = t[t[a, b], c]
    right = t[a, t[b, c]]
    return float(np.mean(left != right))
