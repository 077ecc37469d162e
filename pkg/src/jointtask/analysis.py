"""Embedding structure: cosine similarity, PCA of number tokens, separation scores,
ordering correlations and attention/FFN norm-ratio comparisons."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import data as D
from .errors import DivisorTooLarge, EmptyEvalSet, NoQualifyingRuns, ZeroNormRow
from .model import norm_ratios

SCORE_CAP = 1e6


class RankDeficientWarning(UserWarning):
    pass


@dataclass
class SimMatrix:
    tokens: list
    matrix: np.ndarray


def cosine_similarity(embedding: np.ndarray, tokens: Optional[Sequence[str]] = None) -> SimMatrix:
    emb = np.asarray(embedding, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        name = tokens[zero[0]] if tokens is not None else int(zero[0])
        raise ZeroNormRow(f"embedding row {name!r} has zero norm")
    unit = emb / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    tokens = list(tokens) if tokens is not None else [str(i) for i in range(len(emb))]
    return SimMatrix(tokens, sim)


def average_sims(runs: Iterable, accuracy_threshold: float = 0.9, task: Optional[str] = None) -> SimMatrix:
    """Mean similarity matrix over runs whose accuracy on ``task`` exceeds the threshold.

    ``runs`` yields objects with ``embedding``, ``vocab_tokens`` and an ``accuracy``
    dict (RunRecord works). Without ``task`` every task must pass.
    """
    mats, tokens = [], None
    for run in runs:
        accs = run.accuracy
        ok = accs.get(task, -1.0) > accuracy_threshold if task else all(a > accuracy_threshold for a in accs.values())
        if not ok:
            continue
        sim = cosine_similarity(run.embedding, run.vocab_tokens)
        if tokens is None:
            tokens = sim.tokens
        elif tokens != sim.tokens:
            raise ValueError("runs disagree on the vocabulary")
        mats.append(sim.matrix)
    if not mats:
        raise NoQualifyingRuns(f"no run exceeds accuracy {accuracy_threshold} on {task or 'all tasks'}")
    # sum in a fixed order so the result does not depend on run order
    stacked = np.stack(mats)
    order = np.lexsort(stacked.reshape(len(mats), -1).T[::-1])
    return SimMatrix(tokens, stacked[order].mean(axis=0))


@dataclass
class PCAResult:
    coords: np.ndarray  # n x k
    explained: np.ndarray  # top-k eigenvalues, nonincreasing
    components: np.ndarray  # k x vocab, orthonormal rows


def pca_numbers(sim: SimMatrix, modulus: int, k: int = 5, rows: Optional[Sequence[int]] = None) -> PCAResult:
    """PCA over the number-token rows of a similarity matrix.

    Rows are column-centered; components come from the covariance over all
    vocabulary columns. Each component is flipped so its largest-magnitude
    coordinate is positive.
    """
    if k > modulus:
        raise ValueError(f"k={k} exceeds the number of value tokens {modulus}")
    idx = list(rows) if rows is not None else list(range(modulus))
    x = np.asarray(sim.matrix, dtype=np.float64)[idx]
    x = x - x.mean(axis=0, keepdims=True)
    cov = x.T @ x / max(len(idx) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    rank = np.linalg.matrix_rank(x) if x.size else 0
    if k > rank:
        warnings.warn(f"RankDeficient: k={k} exceeds numerical rank {rank}", RankDeficientWarning, stacklevel=2)
    coords = x @ evecs
    for j in range(coords.shape[1]):
        col = coords[:, j]
        if np.max(np.abs(col)) == 0:
            continue
        if col[np.argmax(np.abs(col))] < 0:
            coords[:, j] *= -1
            evecs[:, j] *= -1
    return PCAResult(coords, evals, evecs.T)


@dataclass
class SeparationReport:
    divisor: int
    scores: np.ndarray  # per PC
    average: float
    centroids: np.ndarray  # PCs x classes
    stds: np.ndarray  # PCs x classes
    meta: dict = field(default_factory=dict)


def separation_score(coords: np.ndarray, modulus: int, divisor: int, n_pcs: int = 5) -> SeparationReport:
    """Between-class centroid distance over within-class spread, per PC then averaged.

    Classes are residues mod ``divisor``. Per PC the score is the mean absolute
    distance between class centroids divided by the mean within-class standard
    deviation. Classes with fewer than two members use the std of all points.
    """
    if divisor < 2:
        raise ValueError("divisor must be >= 2")
    if divisor > modulus:
        raise DivisorTooLarge(f"divisor {divisor} exceeds modulus {modulus}")
    coords = np.asarray(coords, dtype=np.float64)[:modulus, :n_pcs]
    labels = np.arange(modulus) % divisor
    classes = range(divisor)
    n_pc = coords.shape[1]
    cents = np.zeros((n_pc, divisor))
    stds = np.zeros((n_pc, divisor))
    scores = np.zeros(n_pc)
    for j in range(n_pc):
        col = coords[:, j]
        pooled = col.std()
        for r in classes:
            members = col[labels == r]
            cents[j, r] = members.mean()
            stds[j, r] = members.std() if len(members) >= 2 else pooled
        between = np.mean([abs(cents[j, a] - cents[j, b]) for a, b in itertools.combinations(classes, 2)])
        within = stds[j].mean()
        if within <= 1e-12 * max(1.0, np.abs(col).max()):
            scores[j] = SCORE_CAP if between > 0 else 0.0
        else:
            scores[j] = min(between / within, SCORE_CAP)
    return SeparationReport(divisor, scores, float(scores.mean()), cents, stds)


def candidate_divisors(modulus: int) -> list:
    divs = set(range(2, min(6, modulus) + 1))
    divs |= {d for d in range(2, modulus + 1) if modulus % d == 0}
    return sorted(divs)


def null_separation(modulus: int, divisor: int, trials: int = 200, seed: int = 0, n_pcs: int = 5) -> np.ndarray:
    """Averaged separation scores of i.i.d. standard-normal coordinates."""
    rng = np.random.default_rng(seed)
    return np.array([separation_score(rng.standard_normal((modulus, n_pcs)), modulus, divisor, n_pcs).average
                     for _ in range(trials)])


def ordering_diagnostic(coords: np.ndarray) -> np.ndarray:
    """Spearman correlation between token value and each PC coordinate."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < 3:
        raise ValueError("need at least 3 numbers")
    values = np.arange(coords.shape[0])
    out = []
    for j in range(coords.shape[1]):
        col = coords[:, j]
        out.append(0.0 if np.ptp(col) == 0 else stats.spearmanr(values, col)[0])
    return np.array(out)


def ordering_null_band(n: int, trials: int = 1000, q: float = 0.95, seed: int = 0) -> float:
    """|rho| quantile under random permutations of the values."""
    rng = np.random.default_rng(seed)
    values = np.arange(n)
    rhos = [abs(stats.spearmanr(values, rng.permutation(n))[0]) for _ in range(trials)]
    return float(np.quantile(rhos, q))


@dataclass
class RatioStats:
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    cohens_d: float
    ks: float


def cohens_d(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = len(a), len(b)
    pooled = np.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    if pooled == 0:
        return 0.0 if a.mean() == b.mean() else float(np.sign(a.mean() - b.mean()) * np.inf)
    return float((a.mean() - b.mean()) / pooled)


def ratio_stats(a: np.ndarray, b: np.ndarray) -> RatioStats:
    a, b = np.asarray(a, float), np.asarray(b, float)
    ks = float(stats.ks_2samp(a, b).statistic)
    return RatioStats(float(a.mean()), float(b.mean()), float(a.std(ddof=1)), float(b.std(ddof=1)),
                      cohens_d(a, b), ks)


def pooled_ratios(model, lines: Sequence[str], vocab: D.Vocab, step: Optional[int] = -1) -> np.ndarray:
    """Per-position (r_attn, r_ffwd) pooled over lines; ``step=None`` pools every step."""
    out = []
    for line in lines:
        r = norm_ratios(model, D.tokenize(line, vocab))
        out.append(r.reshape(-1, 2) if step is None else r[step])
    return np.concatenate(out) if out else np.zeros((0, 2))


def compare_norm_ratios(model_a, model_b, lines: Sequence[str], vocab: D.Vocab,
                        vocab_b: Optional[D.Vocab] = None, step: Optional[int] = -1) -> dict:
    """Statistics of r_attn and r_ffwd for model A versus model B on the same lines.

    ``vocab_b`` tokenizes the lines for model B when the two vocabularies differ.
    """
    if not lines:
        raise EmptyEvalSet("no evaluation lines")
    ra = pooled_ratios(model_a, lines, vocab, step)
    rb = pooled_ratios(model_b, lines, vocab_b or vocab, step)
    return {"attn": ratio_stats(ra[:, 0], rb[:, 0]), "ffwd": ratio_stats(ra[:, 1], rb[:, 1])}
