"""The S3 x S3 block-diagonal permutation group and its ListOps-style datasets.

An element is a 6x6 block-diagonal permutation matrix made of two 3x3 blocks.
Ids run over [0, 36): ``id = 6 * index(top) + index(bottom)`` where S3 is
ordered lexicographically in one-line notation (012, 021, 102, 120, 201, 210).
Composition is ``(a o b)(x) = a(b(x))``.
"""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Algebra, DatasetSplit, Vocab, make_split, render_cot, sample_tree

S3 = tuple(itertools.permutations(range(3)))
_S3_INDEX = {p: i for i, p in enumerate(S3)}
N_ELEMENTS = 36


def compose(p: tuple, q: tuple) -> tuple:
    return tuple(p[q[x]] for x in range(3))


@dataclass(frozen=True)
class GroupElement:
    top: tuple
    bottom: tuple

    @property
    def id(self) -> int:
        return 6 * _S3_INDEX[self.top] + _S3_INDEX[self.bottom]

    @classmethod
    def from_id(cls, i: int) -> "GroupElement":
        if not 0 <= i < N_ELEMENTS:
            raise ValueError(f"group element id {i} outside [0, 36)")
        return cls(S3[i // 6], S3[i % 6])

    def matrix(self) -> np.ndarray:
        m = np.zeros((6, 6), dtype=int)
        for x in range(3):
            m[self.top[x], x] = 1
            m[3 + self.bottom[x], 3 + x] = 1
        return m


IDENTITY = GroupElement((0, 1, 2), (0, 1, 2))


def op_full(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(compose(a.top, b.top), compose(a.bottom, b.bottom))


def op_top(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(compose(a.top, b.top), a.bottom)


def op_bottom(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(a.top, compose(a.bottom, b.bottom))


class GroupOp(enum.Enum):
    OP = "OP"
    OP_TOP = "OP_TOP"
    OP_BOTTOM = "OP_BOTTOM"

    @classmethod
    def parse(cls, name: str) -> "GroupOp":
        key = name.strip().upper().replace("-", "_")
        if key in ("TOP",):
            key = "OP_TOP"
        if key in ("BOTTOM",):
            key = "OP_BOTTOM"
        return cls(key)

    def token(self, modulus: int = N_ELEMENTS) -> str:
        return self.value


_BINARY = {GroupOp.OP: op_full, GroupOp.OP_TOP: op_top, GroupOp.OP_BOTTOM: op_bottom}


def cayley_table(kind: GroupOp = GroupOp.OP) -> np.ndarray:
    f = _BINARY[kind]
    els = [GroupElement.from_id(i) for i in range(N_ELEMENTS)]
    return np.array([[f(a, b).id for b in els] for a in els], dtype=np.int64)


_TABLES = {k: cayley_table(k) for k in GroupOp}


def apply_group_op(kind: GroupOp, operands: Sequence[int]) -> int:
    """Left fold of the binary operation over element ids."""
    table = _TABLES[kind]
    acc = operands[0]
    for x in operands[1:]:
        acc = int(table[acc, x])
    return acc


class PermAlgebra(Algebra):
    def leaf_token(self, value):
        return f"g{value}"

    def leaf_value(self, token):
        return int(token[1:])

    def op_token(self, kind, modulus):
        return kind.value

    def apply(self, kind, modulus, operands):
        for x in operands:
            if not 0 <= x < N_ELEMENTS:
                raise ValueError(f"group element id {x} outside [0, 36)")
        return apply_group_op(kind, operands)


def perm_vocab(ops: Sequence[GroupOp]) -> Vocab:
    kinds = [k for k in GroupOp if k in set(ops)]
    return Vocab.build([f"g{i}" for i in range(N_ELEMENTS)], [k.value for k in kinds])


def perm_op_lookup(token: str) -> tuple:
    return GroupOp(token), N_ELEMENTS


def perm_dataset(ops: Sequence, count: int, rng: random.Random, *, max_depth: int = 2,
                 max_args: int = 3, cot: bool = True) -> list:
    kinds = tuple(k for k in GroupOp if k in {GroupOp.parse(o) if isinstance(o, str) else o for o in ops})
    if not kinds:
        raise ValueError("perm_dataset needs at least one group operation")
    if count < 1:
        raise ValueError("count must be >= 1")
    algebra = PermAlgebra()
    return [render_cot(sample_tree(rng, kinds, N_ELEMENTS, N_ELEMENTS, max_depth, max_args),
                       cot=cot, algebra=algebra)
            for _ in range(count)]


def perm_split(lines: Sequence[str], rng: random.Random, fraction: float = 0.1) -> DatasetSplit:
    """Split on excluded ordered element pairs (10% of the 36**2 by default)."""
    return make_split(lines, None, rng, n_values=N_ELEMENTS, arity=2, fraction=fraction,
                      leaf_value=PermAlgebra().leaf_value)


def build_perm_dataset(ops: Sequence, seed: int, count: int = 50_000, **kwargs) -> DatasetSplit:
    rng = random.Random(seed)
    return perm_split(perm_dataset(ops, count, rng, **kwargs), rng)
