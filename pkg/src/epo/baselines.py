"""Reference points for dreaming: uniformly random prompts and corpus scans."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .core import DegenerateBaselineError, InputError
from .engine import Scorer


@dataclass(frozen=True)
class RandomBaselineStats:
    mu_random: float
    sigma_random: float
    n_samples: int
    max_alignment: float


def random_baseline(scorer: Scorer, n: int, n_samples: int, seed: int) -> tuple[RandomBaselineStats, np.ndarray]:
    """Score ``n_samples`` uniformly random prompts. Returns the stats and the raw feature values."""
    if n_samples < 2:
        raise InputError("random baseline needs at least two samples")
    V = scorer.feature_model.vocab.size
    ids = np.random.default_rng([seed, 7]).integers(0, V, size=(n_samples, n))
    f, _ = scorer.score_arrays(ids)
    sigma = float(np.std(f, ddof=1))
    return RandomBaselineStats(float(np.mean(f)), sigma, n_samples, float(np.max(f))), f


def zscore(a: float, stats: RandomBaselineStats) -> float:
    if not stats.sigma_random > 0:
        raise DegenerateBaselineError("random baseline has zero standard deviation; z-scores are undefined")
    return (a - stats.mu_random) / stats.sigma_random


@dataclass(frozen=True)
class ScanHit:
    feature: float
    mean_ce: float
    start: int
    text: str


@dataclass
class CorpusScanResult:
    top: list[ScanHit]
    n_windows: int


def corpus_scan(scorer: Scorer, corpus, n: int, top_n: int, stride: int = 1,
                batch_windows: int = 4096) -> CorpusScanResult:
    """Top ``top_n`` length-``n`` windows of ``corpus`` by feature value; ties favour earlier windows."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if len(corpus) < n:
        raise InputError(f"corpus has {len(corpus)} tokens, need at least {n}")
    if stride < 1 or top_n < 1:
        raise InputError("stride and top_n must be positive")
    starts = np.arange(0, len(corpus) - n + 1, stride)
    heap: list[tuple[float, int, float]] = []
    for b in range(0, len(starts), batch_windows):
        s = starts[b : b + batch_windows]
        windows = corpus[s[:, None] + np.arange(n)[None, :]]
        f, ce = scorer.score_arrays(windows)
        for start, fv, c in zip(s, f, ce.mean(axis=1)):
            item = (float(fv), -int(start), float(c))
            if len(heap) < top_n:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    vocab = scorer.feature_model.vocab
    top = [ScanHit(fv, c, -neg, vocab.decode(corpus[-neg : -neg + n]))
           for fv, neg, c in sorted(heap, reverse=True)]
    return CorpusScanResult(top, len(starts))


def max_z(values, stats: RandomBaselineStats) -> float:
    return zscore(float(np.max(values)), stats)

