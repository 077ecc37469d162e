import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from jointtask import analysis as A
from jointtask.errors import DivisorTooLarge, EmptyEvalSet, NoQualifyingRuns, ZeroNormRow
from jointtask.model import ModelConfig, TinyTransformer
from jointtask.train import Mixture


def test_cosine_identity_and_hand_table():
    assert np.allclose(A.cosine_similarity(np.eye(4)).matrix, np.eye(4))
    emb = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, -2.0]])
    r2 = 1 / np.sqrt(2)
    hand = np.array([[1, r2, 0], [r2, 1, -r2], [0, -r2, 1]])
    np.testing.assert_allclose(A.cosine_similarity(emb).matrix, hand, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.integers(2, 20), st.integers(1, 10))
def test_similarity_invariants(seed, n, d):
    emb = np.random.default_rng(seed).normal(size=(n, d)) + 1e-3
    m = A.cosine_similarity(emb).matrix
    assert np.allclose(m, m.T)
    assert np.all(np.abs(np.diag(m) - 1) < 1e-6)
    assert np.all(m <= 1) and np.all(m >= -1)


def test_zero_norm_row():
    with pytest.raises(ZeroNormRow):
        A.cosine_similarity(np.array([[1.0, 0.0], [0.0, 0.0]]), ["a", "b"])


def _run(emb, acc, tokens=None):
    tokens = tokens or [str(i) for i in range(len(emb))]
    return SimpleNamespace(embedding=emb, vocab_tokens=tokens, accuracy=acc)


def test_average_sims():
    rng = np.random.default_rng(0)
    e1, e2, e3 = (rng.normal(size=(6, 4)) for _ in range(3))
    single = A.average_sims([_run(e1, {"add": 0.95})], task="add")
    np.testing.assert_array_equal(single.matrix, A.cosine_similarity(e1).matrix)
    runs = [_run(e1, {"add": 0.95}), _run(e2, {"add": 0.99}), _run(e3, {"add": 0.5})]
    avg = A.average_sims(runs, task="add")
    ref = (A.cosine_similarity(e1).matrix + A.cosine_similarity(e2).matrix) / 2
    np.testing.assert_allclose(avg.matrix, ref, atol=1e-15)
    assert np.array_equal(A.average_sims(runs[::-1], task="add").matrix, avg.matrix)
    with pytest.raises(NoQualifyingRuns):
        A.average_sims(runs, accuracy_threshold=1.01, task="add")


def test_pca_constant_rows():
    sim = A.SimMatrix([str(i) for i in range(5)], np.ones((5, 5)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", A.RankDeficientWarning)
        res = A.pca_numbers(sim, 5, k=3)
    assert np.allclose(res.explained, 0) and np.allclose(res.coords, 0)


def test_pca_orthonormal_and_ordered():
    emb = np.random.default_rng(1).normal(size=(25, 12))
    res = A.pca_numbers(A.cosine_similarity(emb), 20, k=5)
    c = res.components
    assert np.max(np.abs(c @ c.T - np.eye(5))) < 1e-8
    assert np.all(np.diff(res.explained) <= 0)
    for j in range(5):
        col = res.coords[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_pca_basis_invariance():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(15, 8))
    q = ortho_group.rvs(8, random_state=3)
    a = A.pca_numbers(A.cosine_similarity(emb), 10, k=5)
    b = A.pca_numbers(A.cosine_similarity(emb @ q), 10, k=5)
    np.testing.assert_allclose(a.coords, b.coords, atol=1e-8)


def test_pca_rank_warning():
    emb = np.random.default_rng(0).normal(size=(6, 2))
    with pytest.warns(A.RankDeficientWarning):
        A.pca_numbers(A.cosine_similarity(emb), 6, k=5)
    with pytest.raises(ValueError):
        A.pca_numbers(A.cosine_similarity(emb), 6, k=7)


def test_separation_cap_and_errors():
    n = 10
    coords = np.tile((np.arange(n) % 2)[:, None].astype(float), (1, 5))
    rep = A.separation_score(coords, n, 2)
    assert rep.average == A.SCORE_CAP
    with pytest.raises(DivisorTooLarge):
        A.separation_score(coords, n, 11)


def test_separation_null_below_two():
    scores = A.null_separation(40, 2, trials=20, seed=0)
    assert np.all(scores < 2.0)
    assert scores.mean() < 1.0


def test_separation_singleton_classes_use_pooled_std():
    coords = np.random.default_rng(0).normal(size=(7, 5))
    rep = A.separation_score(coords, 7, 5)  # classes 0, 1 have two members, 2..4 one
    assert np.all(np.isfinite(rep.scores)) and rep.average == pytest.approx(rep.scores.mean())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6), st.floats(-5, 5))
def test_separation_invariances(seed, d, shift):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(24, 5))
    base = A.separation_score(coords, 24, d)
    flipped = coords * np.array([1, -1, 1, -1, -1])
    shifted = coords.copy()
    shifted[:, 2] += shift
    assert A.separation_score(flipped, 24, d).average == pytest.approx(base.average, rel=1e-9)
    assert A.separation_score(shifted, 24, d).average == pytest.approx(base.average, rel=1e-9)
    assert np.all(base.scores >= 0)


def test_separation_monotone_in_noise():
    rng = np.random.default_rng(5)
    n, d = 30, 3
    centers = rng.normal(size=(d, 5)) * 3
    clean = centers[np.arange(n) % d]
    noise = rng.normal(size=(n, 5))
    scores = [A.separation_score(clean + s * noise, n, d).average for s in (0.01, 0.1, 1.0)]
    assert scores[0] > scores[1] > scores[2]


def test_candidate_divisors():
    assert A.candidate_divisors(20) == [2, 3, 4, 5, 6, 10, 20]
    assert A.candidate_divisors(45) == [2, 3, 4, 5, 6, 9, 15, 45]


def test_ordering_diagnostic():
    n = 12
    coords = np.column_stack([np.arange(n), -np.arange(n), np.zeros(n)])
    rho = A.ordering_diagnostic(coords)
    assert rho[0] == pytest.approx(1.0) and rho[1] == pytest.approx(-1.0) and rho[2] == 0.0
    band = A.ordering_null_band(n, trials=500)
    rand = A.ordering_diagnostic(np.random.default_rng(0).normal(size=(n, 1)))
    assert 0 < band < 1 and abs(rand[0]) < 1
    with pytest.raises(ValueError):
        A.ordering_diagnostic(np.zeros((2, 1)))


def test_cohens_d_analytic():
    base = np.random.default_rng(0).normal(size=500)
    s = base.std(ddof=1)
    assert A.cohens_d(base + 0.7, base) == pytest.approx(0.7 / s)


def test_compare_norm_ratios_self_and_empty():
    mix = Mixture(("add",), modulus=5, count=1500)
    datasets, vocab = mix.build()
    model = TinyTransformer(ModelConfig(n_embed=8, vocab_size=len(vocab)), seed=0)
    lines = datasets["add"].test[:20]
    res = A.compare_norm_ratios(model, model, lines, vocab)
    for st_ in res.values():
        assert st_.cohens_d == 0.0 and st_.ks == 0.0
    other = TinyTransformer(ModelConfig(n_embed=8, vocab_size=len(vocab)), seed=1)
    res = A.compare_norm_ratios(model, other, lines, vocab)
    assert res["attn"].ks > 0
    with pytest.raises(EmptyEvalSet):
        A.compare_norm_ratios(model, model, [], vocab)
