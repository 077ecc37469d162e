"""Nested-expression datasets: sampling, CoT rendering, tokenization, splits.

Lines look like ``add_10(1 2 add_10(3 4))>add_10(1 2 7)>0=0<eos>``: the
original expression, one ``>``-separated stage per resolved innermost
operation, then ``=answer<eos>``.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from .errors import EmptySplit, UnknownToken
from .ops import OpKind, ShuffledTable, eval_op, make_shuffled_table

STRUCTURAL = ("(", ")", "=", ">", "<eos>")
EOS = "<eos>"

_UNIT_RE = re.compile(r"<eos>|[()=>]|[^\s()=><]+")
# An operation whose operands are all already values: "(a b)" or "(a b c)".
_FLAT_GROUP_RE = re.compile(r"\(([^()]*)\)")


@dataclass(frozen=True)
class Leaf:
    value: int


@dataclass(frozen=True)
class Node:
    kind: object  # OpKind, or a group operation for permutation datasets
    modulus: int
    children: tuple

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children if isinstance(c, Node)), default=0)


Expr = Union[Leaf, Node]


def expr_depth(expr: Expr) -> int:
    return expr.depth() if isinstance(expr, Node) else 0


def iter_nodes(expr: Expr):
    if isinstance(expr, Node):
        yield expr
        for c in expr.children:
            yield from iter_nodes(c)


@dataclass(frozen=True)
class TaskSpec:
    ops: tuple
    modulus: int
    shuffle_seed: Optional[int] = None
    max_depth: int = 2
    max_args: int = 3
    cot: bool = True

    def __post_init__(self):
        ops = tuple(OpKind.parse(o) if isinstance(o, str) else o for o in self.ops)
        if not ops:
            raise ValueError("TaskSpec needs at least one operation")
        ops = tuple(k for k in OpKind if k in set(ops))
        object.__setattr__(self, "ops", ops)
        if self.modulus < 1:
            raise ValueError("modulus must be positive")
        if self.max_depth < 1 or self.max_args < 2:
            raise ValueError("max_depth must be >= 1 and max_args >= 2")
        if OpKind.SHUF_ADD in ops and self.shuffle_seed is None:
            raise ValueError("SHUF_ADD requires shuffle_seed")

    @property
    def name(self) -> str:
        return "+".join(k.value for k in self.ops) + f"_{self.modulus}"

    def table(self) -> Optional[ShuffledTable]:
        if OpKind.SHUF_ADD in self.ops:
            return make_shuffled_table(self.modulus, self.shuffle_seed)
        return None

    def with_ops(self, ops) -> "TaskSpec":
        return TaskSpec(tuple(ops), self.modulus, self.shuffle_seed if OpKind.SHUF_ADD in ops else None,
                        self.max_depth, self.max_args, self.cot)


class Algebra:
    """How leaves and operations of an expression are printed and evaluated."""

    def leaf_token(self, value: int) -> str:
        raise NotImplementedError

    def op_token(self, kind, modulus: int) -> str:
        raise NotImplementedError

    def apply(self, kind, modulus: int, operands: Sequence[int]) -> int:
        raise NotImplementedError

    def leaf_value(self, token: str) -> int:
        raise NotImplementedError


class Arithmetic(Algebra):
    def __init__(self, table: Optional[ShuffledTable] = None):
        self.table = table

    def leaf_token(self, value):
        return str(value)

    def leaf_value(self, token):
        return int(token)

    def op_token(self, kind, modulus):
        return kind.token(modulus)

    def apply(self, kind, modulus, operands):
        table = self.table if kind is OpKind.SHUF_ADD else None
        return eval_op(kind, modulus, operands, table)


# -- sampling ---------------------------------------------------------------

def sample_tree(rng: random.Random, kinds: Sequence, n_values: int, modulus: int,
                max_depth: int, max_args: int, p_nest: float = 0.5) -> Node:
    arity = rng.randint(2, max_args)
    kind = kinds[rng.randrange(len(kinds))]
    children = []
    for _ in range(arity):
        if max_depth > 1 and rng.random() < p_nest:
            children.append(sample_tree(rng, kinds, n_values, modulus, max_depth - 1, max_args, p_nest))
        else:
            children.append(Leaf(rng.randrange(n_values)))
    return Node(kind, modulus, tuple(children))


def sample_expr(rng: random.Random, spec: TaskSpec) -> Node:
    return sample_tree(rng, spec.ops, spec.modulus, spec.modulus, spec.max_depth, spec.max_args)


def eval_expr(expr: Expr, algebra: Algebra) -> int:
    if isinstance(expr, Leaf):
        return expr.value
    return algebra.apply(expr.kind, expr.modulus, [eval_expr(c, algebra) for c in expr.children])


# -- rendering --------------------------------------------------------------

def format_expr(expr: Expr, algebra: Algebra) -> str:
    if isinstance(expr, Leaf):
        return algebra.leaf_token(expr.value)
    inner = " ".join(format_expr(c, algebra) for c in expr.children)
    return f"{algebra.op_token(expr.kind, expr.modulus)}({inner})"


def _innermost_path(expr: Node) -> tuple:
    """Path to the deepest node, leftmost among ties."""
    best_path, best_depth = (), 0
    stack = [((), expr, 0)]
    while stack:
        path, node, depth = stack.pop()
        if depth > best_depth or (depth == best_depth and path < best_path):
            best_path, best_depth = path, depth
        for i, c in enumerate(node.children):
            if isinstance(c, Node):
                stack.append((path + (i,), c, depth + 1))
    return best_path


def _replace(expr: Node, path: tuple, new: Expr) -> Expr:
    if not path:
        return new
    i = path[0]
    children = list(expr.children)
    children[i] = _replace(children[i], path[1:], new)
    return Node(expr.kind, expr.modulus, tuple(children))


def reduce_once(expr: Node, algebra: Algebra) -> tuple:
    """Resolve one innermost operation. Returns (new_expr, kind, operands, result)."""
    path = _innermost_path(expr)
    node = expr
    for i in path:
        node = node.children[i]
    operands = tuple(c.value for c in node.children)
    result = algebra.apply(node.kind, node.modulus, operands)
    return _replace(expr, path, Leaf(result)), node.kind, operands, result


def reduction_steps(expr: Expr, algebra: Algebra) -> list:
    """All intermediate expressions E0..Ek (Ek is a Leaf)."""
    stages = [expr]
    while isinstance(stages[-1], Node):
        stages.append(reduce_once(stages[-1], algebra)[0])
    return stages


def render_cot(expr: Expr, table: Optional[ShuffledTable] = None, cot: bool = True,
               algebra: Optional[Algebra] = None) -> str:
    algebra = algebra or Arithmetic(table)
    stages = reduction_steps(expr, algebra)
    answer = format_expr(stages[-1], algebra)
    if not cot:
        return f"{format_expr(expr, algebra)}={answer}{EOS}"
    return ">".join(format_expr(s, algebra) for s in stages) + f"={answer}{EOS}"


# -- parsing ----------------------------------------------------------------

def split_units(line: str) -> list:
    return _UNIT_RE.findall(line)


def parse_expr(text: str, op_lookup: Callable[[str], tuple], leaf_value: Callable[[str], int]) -> Expr:
    """Parse one stage, e.g. ``add_10(1 2 add_10(3 4))``.

    ``op_lookup`` maps an operation token to ``(kind, modulus)``.
    """
    units = split_units(text)
    pos = 0

    def parse():
        nonlocal pos
        tok = units[pos]
        pos += 1
        if pos < len(units) and units[pos] == "(":
            kind, modulus = op_lookup(tok)
            pos += 1
            children = []
            while units[pos] != ")":
                children.append(parse())
            pos += 1
            return Node(kind, modulus, tuple(children))
        return Leaf(leaf_value(tok))

    expr = parse()
    if pos != len(units):
        raise ValueError(f"trailing tokens in {text!r}")
    return expr


def arithmetic_op_lookup(token: str) -> tuple:
    name, _, mod = token.rpartition("_")
    return OpKind.parse(name), int(mod)


def split_line(line: str) -> tuple:
    """Return (stages, answer) of a rendered line."""
    body = line[:-len(EOS)] if line.endswith(EOS) else line
    lhs, _, answer = body.partition("=")
    return lhs.split(">"), answer


# -- vocabulary -------------------------------------------------------------

class Vocab:
    def __init__(self, tokens: Sequence[str], n_values: Optional[int] = None):
        self.tokens = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.tokens)}
        if len(self.stoi) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.n_values = n_values

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocab({len(self)} tokens)"

    @classmethod
    def build(cls, value_tokens: Sequence[str], op_tokens: Iterable[str]) -> "Vocab":
        ops = list(dict.fromkeys(op_tokens))
        return cls(list(value_tokens) + ops + list(STRUCTURAL), n_values=len(value_tokens))

    @classmethod
    def for_specs(cls, specs: Sequence[TaskSpec]) -> "Vocab":
        moduli = {s.modulus for s in specs}
        if len(moduli) != 1:
            raise ValueError(f"specs disagree on modulus: {sorted(moduli)}")
        n = moduli.pop()
        kinds = [k for k in OpKind if any(k in s.ops for s in specs)]
        return cls.build([str(i) for i in range(n)], [k.token(n) for k in kinds])

    @property
    def value_ids(self) -> list:
        return list(range(self.n_values))

    def id(self, token: str) -> int:
        try:
            return self.stoi[token]
        except KeyError:
            raise UnknownToken(token) from None


def tokenize(line: str, vocab: Vocab) -> list:
    return [vocab.id(u) for u in split_units(line)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    prev_operand = False
    for i in ids:
        tok = vocab.tokens[i]
        if prev_operand and tok not in STRUCTURAL:
            out.append(" ")
        out.append(tok)
        prev_operand = i < vocab.n_values or tok == ")"
    return "".join(out)


# -- splits -----------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    test: list
    excluded: frozenset = field(default_factory=frozenset)

    # exposed under the contract's name
    @property
    def excluded_triplets(self) -> frozenset:
        return self.excluded


def operand_tuples(line: str, leaf_value: Callable[[str], int] = int, arity: int = 3) -> set:
    """Operand tuples of every reduction step recoverable from a CoT line.

    Every all-value group ``(a b c)`` in any stage is the operand tuple of a
    step that is resolved at some point. With ``arity=3`` the 3-operand tuples
    are returned; with ``arity=2`` each step contributes its leading pair.
    """
    found = set()
    for stage in split_line(line)[0]:
        for group in _FLAT_GROUP_RE.findall(stage):
            vals = group.split()
            if arity == 3 and len(vals) == 3:
                found.add(tuple(leaf_value(v) for v in vals))
            elif arity == 2 and len(vals) >= 2:
                found.add((leaf_value(vals[0]), leaf_value(vals[1])))
    return found


def make_split(lines: Sequence[str], spec: Optional[TaskSpec], rng: random.Random, *,
               n_values: Optional[int] = None, arity: int = 3, fraction: float = 0.1,
               leaf_value: Callable[[str], int] = int) -> DatasetSplit:
    n = n_values if n_values is not None else spec.modulus
    total = n ** arity
    n_excluded = math.ceil(fraction * total)
    picked = rng.sample(range(total), n_excluded)
    excluded = set()
    for code in picked:
        tup = []
        for _ in range(arity):
            code, r = divmod(code, n)
            tup.append(r)
        excluded.add(tuple(reversed(tup)))
    train, test = [], []
    for line in dict.fromkeys(lines):
        if operand_tuples(line, leaf_value, arity) & excluded:
            test.append(line)
        else:
            train.append(line)
    if not train or not test:
        raise EmptySplit(f"split produced {len(train)} train / {len(test)} test lines")
    return DatasetSplit(train, test, frozenset(excluded))


def dataset_size_for(modulus: int) -> int:
    if modulus < 2:
        raise ValueError("modulus must be >= 2")
    return 5000 * modulus


def generate_lines(spec: TaskSpec, count: int, rng: random.Random) -> list:
    algebra = Arithmetic(spec.table())
    return [render_cot(sample_expr(rng, spec), cot=spec.cot, algebra=algebra) for _ in range(count)]


def build_dataset(spec: TaskSpec, seed: int, count: Optional[int] = None) -> DatasetSplit:
    """Generate and split one arithmetic dataset, deterministic in ``seed``."""
    rng = random.Random(seed)
    lines = generate_lines(spec, count or dataset_size_for(spec.modulus), rng)
    return make_split(lines, spec, rng)


# -- files ------------------------------------------------------------------

def write_dataset(out_dir, split: DatasetSplit, meta: dict) -> Path:
    """Write train.txt, test.txt and meta.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("".join(line + "\n" for line in split.train), encoding="utf-8")
    (out / "test.txt").write_text("".join(line + "\n" for line in split.test), encoding="utf-8")
    meta = dict(meta)
    meta["n_train"] = len(split.train)
    meta["n_test"] = len(split.test)
    meta["excluded"] = sorted(list(t) for t in split.excluded)
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return out


def read_dataset(path) -> tuple:
    """Inverse of :func:`write_dataset`; returns (split, meta)."""
    p = Path(path)
    meta = json.loads((p / "meta.json").read_text(encoding="utf-8"))
    train = (p / "train.txt").read_text(encoding="utf-8").splitlines()
    test = (p / "test.txt").read_text(encoding="utf-8").splitlines()
    excluded = frozenset(tuple(t) for t in meta.get("excluded", []))
    return DatasetSplit(train, test, excluded), meta


def spec_meta(spec: TaskSpec, seed: int) -> dict:
    return {
        "ops": [k.value for k in spec.ops],
        "modulus": spec.modulus,
        "shuffle_seed": spec.shuffle_seed,
        "max_depth": spec.max_depth,
        "max_args": spec.max_args,
        "cot": spec.cot,
        "seed": seed,
    }
