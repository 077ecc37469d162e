import itertools
import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from jointtask.errors import EmptyOperands, MissingTable, OperandOutOfRange
from jointtask.ops import (OpKind, addition_table, associativity_violation_fraction, eval_op,
                           make_shuffled_table)

# Independent reference semantics, written without looking at eval_op.
ORACLE = {
    OpKind.MAX: lambda xs, n: max(xs),
    OpKind.MIN: lambda xs, n: min(xs),
    OpKind.MED: lambda xs, n: statistics.median_low(xs),
    OpKind.ADD: lambda xs, n: sum(xs) % n,
    OpKind.PROD: lambda xs, n: eval("*".join(map(str, xs))) % n,
    OpKind.NADD: lambda xs, n: (xs[0] - sum(xs[1::2]) + sum(xs[2::2])) % n,
}


def test_worked_examples():
    assert eval_op(OpKind.MIN, 10, (7, 4, 9)) == 4
    assert eval_op(OpKind.ADD, 10, (9, 7)) == 6
    assert eval_op(OpKind.NADD, 10, (1, 2, 3)) == 2
    assert eval_op(OpKind.PROD, 20, (1, 1, 1)) == 1


@pytest.mark.parametrize("n", range(1, 13))
def test_exhaustive_oracle_equivalence(n):
    for kind, ref in ORACLE.items():
        for arity in (2, 3):
            for xs in itertools.product(range(n), repeat=arity):
                assert eval_op(kind, n, xs) == ref(xs, n), (kind, n, xs)


def test_errors():
    with pytest.raises(EmptyOperands):
        eval_op(OpKind.MAX, 10, ())
    with pytest.raises(OperandOutOfRange):
        eval_op(OpKind.ADD, 10, (3, 10))
    with pytest.raises(OperandOutOfRange):
        eval_op(OpKind.ADD, 10, (-1, 2))
    with pytest.raises(MissingTable):
        eval_op(OpKind.SHUF_ADD, 10, (1, 2))
    with pytest.raises(MissingTable):
        eval_op(OpKind.ADD, 10, (1, 2), make_shuffled_table(10, 0))


def test_med_singleton_and_even_length():
    for a in range(10):
        assert eval_op(OpKind.MED, 10, (a,)) == a
    assert eval_op(OpKind.MED, 10, (8, 2)) == 2
    assert eval_op(OpKind.MED, 10, (1, 9, 3, 7)) == 3


@given(st.integers(2, 30).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.integers(0, n - 1), min_size=1, max_size=5))))
def test_max_dominates_min(case):
    n, xs = case
    assert eval_op(OpKind.MAX, n, xs) >= eval_op(OpKind.MED, n, xs) >= eval_op(OpKind.MIN, n, xs)


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.integers(0, n - 1), min_size=3, max_size=3))))
def test_add_prod_commutative_associative(case):
    n, (a, b, c) = case
    for kind in (OpKind.ADD, OpKind.PROD):
        assert eval_op(kind, n, (a, b)) == eval_op(kind, n, (b, a))
        left = eval_op(kind, n, (eval_op(kind, n, (a, b)), c))
        right = eval_op(kind, n, (a, eval_op(kind, n, (b, c))))
        assert left == right == eval_op(kind, n, (a, b, c))


@pytest.mark.parametrize("n", [3, 5, 10, 26])
def test_nadd_not_commutative(n):
    assert any(eval_op(OpKind.NADD, n, (a, b)) != eval_op(OpKind.NADD, n, (b, a))
               for a in range(n) for b in range(n))


def _check_table(table):
    n = table.modulus
    t = table.entries
    assert all(t[i][j] == t[j][i] for i in range(n) for j in range(n))
    upper = sorted(t[i][j] for i in range(n) for j in range(n) if i < j)
    assert upper == sorted((i + j) % n for i in range(n) for j in range(n) if i < j)
    assert sorted(t[i][i] for i in range(n)) == sorted((2 * i) % n for i in range(n))
    assert all(0 <= t[i][j] < n for i in range(n) for j in range(n))


@pytest.mark.parametrize("n", [10, 26])
@pytest.mark.parametrize("seed", range(20))
def test_shuffled_table_invariants(n, seed):
    _check_table(make_shuffled_table(n, seed))


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(0, 2 ** 63 - 1))
def test_shuffled_table_property(n, seed):
    _check_table(make_shuffled_table(n, seed))


def test_shuffled_table_deterministic_and_seed_sensitive():
    assert make_shuffled_table(10, 0) == make_shuffled_table(10, 0)
    assert make_shuffled_table(10, 0).entries != make_shuffled_table(10, 1).entries


def test_trivial_tables():
    t1 = make_shuffled_table(1, 123)
    assert t1.entries == ((0,),)
    assert associativity_violation_fraction(t1, 100) == 0.0
    assert associativity_violation_fraction(addition_table(10), 1000) == 0.0
    assert associativity_violation_fraction(addition_table(13), 50, seed=4) == 0.0


def test_shuf_add_left_fold():
    t = make_shuffled_table(10, 0)
    for a, b, c in itertools.product(range(10), repeat=3):
        assert eval_op(OpKind.SHUF_ADD, 10, (a, b, c), t) == t(t(a, b), c)


FIXTURE_N10_SEED0 = 0.806  # 806 of 1000 triples, brute force


def test_associativity_fraction_exhaustive_fixture():
    # frozen from an independent brute-force loop over all 1000 triples
    t = make_shuffled_table(10, 0)
    brute = sum(t(t(a, b), c) != t(a, t(b, c)) for a, b, c in itertools.product(range(10), repeat=3)) / 1000
    assert associativity_violation_fraction(t, 1000) == brute == FIXTURE_N10_SEED0


def test_sampled_fraction_close_to_exhaustive():
    t = make_shuffled_table(26, 3)
    exact = associativity_violation_fraction(t, 26 ** 3)
    approx = associativity_violation_fraction(t, 5000, seed=1)
    assert abs(exact - approx) < 0.05
    assert exact > 0.5
