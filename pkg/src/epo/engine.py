"""Evolutionary prompt optimization.

Each of ``M`` population slots optimises ``f(t) - lambda_i * mean_ce(t)`` for
its own ``lambda_i``. Per iteration every slot takes the one-hot gradient of
its objective, proposes ``r`` single-token mutations drawn from the top-``k``
tokens per position, and then every slot picks the best of the pooled
children under its own objective (with replacement, so one child may fill
several slots). Every ``T_restart`` iterations the population collapses to
its best member under a randomly drawn ``lambda_r``.

With ``M=1``, ``lambda=0`` and no restarts this is greedy coordinate gradient.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np
import torch

from .core import (
    EngineError,
    EpoConfig,
    EpoError,
    InputError,
    LambdaGrid,
    ParetoArchive,
    ScoredPrompt,
    TokenSequence,
    Vocabulary,
)
from .model import FeatureModel, OneHotGradient
from .objectives import Feature, FeatureSpec, rejected_tokens, text_rejected

log = logging.getLogger(__name__)

# fixed so that floating-point results never depend on the worker count
EVAL_CHUNK = 64

_INIT, _CHILDREN, _RESTART = 0, 1, 2


def stream(seed: int, tag: int, iteration: int, slot: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, iteration, slot)."""
    return np.random.default_rng([seed, tag, iteration, slot])


@dataclass
class Population:
    members: list[ScoredPrompt]
    iteration: int = 0

    def __len__(self):
        return len(self.members)

    def ids(self) -> np.ndarray:
        return np.array([m.seq for m in self.members], dtype=np.int64)

    def unique(self) -> int:
        return len({m.seq for m in self.members})


@dataclass
class IterationRecord:
    iteration: int
    lambdas: tuple[float, ...]
    slots: list[ScoredPrompt]
    restart: bool
    restart_lambda: float | None = None

    def to_json(self, vocab: Vocabulary) -> dict:
        return {
            "iter": self.iteration,
            "slots": [
                {"lambda": lam, "feature": sp.feature, "mean_ce": sp.mean_ce, "text": vocab.decode(sp.seq)}
                for lam, sp in zip(self.lambdas, self.slots)
            ],
            "restart": self.restart,
        }


@dataclass
class StepEvent:
    """Everything an observer may want to check about one iteration."""

    iteration: int
    parents: Population
    restart: bool
    restart_lambda: float | None
    pool: list[ScoredPrompt]
    population: Population
    archive: ParetoArchive


@dataclass
class RunResult:
    archive: ParetoArchive
    per_iteration_log: list[IterationRecord]
    final_population: Population
    grid: LambdaGrid
    vocab: Vocabulary
    feature: Feature
    config: EpoConfig = field(repr=False, default=None)


class RunAborted(EngineError):
    def __init__(self, msg: str, partial: RunResult):
        super().__init__(msg)
        self.partial = partial


class Scorer:
    """Batched scoring and gradients for one (feature model, fluency model, feature) triple."""

    def __init__(self, feature_model: FeatureModel, feature: Feature, fluency_model: FeatureModel | None = None,
                 workers: int = 1):
        self.feature_model = feature_model
        self.fluency_model = fluency_model if fluency_model is not None else feature_model
        if self.fluency_model.vocab.tokens != feature_model.vocab.tokens:
            raise InputError("feature and fluency models must share one vocabulary")
        self.feature = feature
        self.workers = max(1, int(workers))

    @property
    def shared(self) -> bool:
        return self.fluency_model is self.feature_model

    def _score_chunk(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            out = self.feature_model.forward_batch(ids)
            f = self.feature(out).numpy()
            ce = out.ce_terms if self.shared else self.fluency_model.forward_batch(ids).ce_terms
        return f, ce.numpy()

    def score_arrays(self, ids) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64)
        chunks = [ids[i : i + EVAL_CHUNK] for i in range(0, len(ids), EVAL_CHUNK)]
        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                results = list(ex.map(self._score_chunk, chunks))
        else:
            results = [self._score_chunk(c) for c in chunks]
        if not results:
            return np.zeros(0), np.zeros((0, ids.shape[1] if ids.ndim == 2 else 0))
        return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])

    def score(self, ids) -> list[ScoredPrompt]:
        ids = np.asarray(ids, dtype=np.int64)
        f, ce = self.score_arrays(ids)
        return [ScoredPrompt(tuple(int(t) for t in row), float(fv), tuple(map(float, c)))
                for row, fv, c in zip(ids, f, ce)]

    def gradients(self, ids, lambdas: Sequence[float]) -> np.ndarray:
        """(B, n, V) gradients of ``f - lambda_b * mean_ce`` at each one-hot prompt."""
        ids = np.asarray(ids, dtype=np.int64)
        x = self.feature_model.onehot(ids).requires_grad_(True)
        out = self.feature_model.relaxed(x)
        ce = out.mean_ce if self.shared else self.fluency_model.relaxed(x).mean_ce
        lam = torch.as_tensor(np.asarray(lambdas, dtype=np.float64))
        total = (self.feature(out) - lam * ce).sum()
        if not total.requires_grad:
            return np.zeros(x.shape)
        (g,) = torch.autograd.grad(total, x)
        return g.numpy()


def init_population(config: EpoConfig, vocab: Vocabulary, init: Sequence[int] | None = None) -> list[TokenSequence]:
    patterns = config.reject_substrings
    if init is not None:
        seq = vocab.check(init)
        if len(seq) != config.n:
            raise InputError(f"initial prompt has {len(seq)} tokens, config.n is {config.n}")
        if patterns and text_rejected(vocab.decode(seq), patterns):
            raise InputError("initial prompt contains a rejected substring")
        return [seq] * config.M
    allowed = np.flatnonzero(~rejected_tokens(vocab, patterns))
    if len(allowed) == 0:
        raise InputError("every token is rejected")
    out = []
    for slot in range(config.M):
        rng = stream(config.seed, _INIT, 0, slot)
        for _ in range(1000):
            seq = tuple(int(t) for t in rng.choice(allowed, size=config.n))
            if not patterns or not text_rejected(vocab.decode(seq), patterns):
                break
        else:
            raise InputError("could not draw a random prompt avoiding the rejected substrings")
        out.append(seq)
    return out


def topk_candidates(grad: np.ndarray, seq: Sequence[int], k: int, ranking: str = "signed",
                    reject_mask: np.ndarray | None = None) -> np.ndarray:
    """(n, k') token ids per position, best first; excludes rejected tokens and the current token.

    ``k'`` is ``k`` clamped to the number of admissible tokens.
    """
    n, V = grad.shape
    scores = grad if ranking == "signed" else np.abs(grad)
    mask = np.zeros((n, V), dtype=bool)
    if reject_mask is not None:
        mask |= reject_mask[None, :]
    mask[np.arange(n), np.asarray(seq)] = True
    avail = int((~mask).sum(axis=1).min())
    if avail == 0:
        raise EngineError("no admissible replacement tokens")
    if k > avail:
        warnings.warn(f"k={k} exceeds the {avail} admissible tokens; clamping", RuntimeWarning, stacklevel=2)
        k = avail
    scores = np.where(mask, -np.inf, scores)
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def propose_children(member: ScoredPrompt, grad: OneHotGradient | np.ndarray, config: EpoConfig,
                     rng: np.random.Generator, reject_mask: np.ndarray | None = None) -> list[TokenSequence]:
    g = grad.grad if isinstance(grad, OneHotGradient) else grad
    cand = topk_candidates(g, member.seq, config.k, config.grad_ranking, reject_mask)
    n = len(member.seq)
    pos = rng.integers(0, n, size=config.r)
    pick = rng.integers(0, cand.shape[1], size=config.r)
    children = np.tile(np.asarray(member.seq, dtype=np.int64), (config.r, 1))
    children[np.arange(config.r), pos] = cand[pos, pick]
    return [tuple(int(t) for t in c) for c in children]


def best_index(pool: Sequence[ScoredPrompt], lam: float) -> int:
    """argmax of ``f - lam * mean_ce``; ties go to lower mean_ce, then smaller token ids."""
    f = np.array([sp.feature for sp in pool])
    ce = np.array([sp.mean_ce for sp in pool])
    s = f - lam * ce
    cand = np.flatnonzero(s == s.max())
    if len(cand) == 1:
        return int(cand[0])
    return int(min(cand, key=lambda i: (pool[i].mean_ce, pool[i].seq)))


def select(pool: Sequence[ScoredPrompt], grid: LambdaGrid | Sequence[float]) -> list[ScoredPrompt]:
    if not pool:
        raise EngineError("empty candidate pool")
    return [pool[best_index(pool, lam)] for lam in grid]


def restart(pop: Population, rng: np.random.Generator, config: EpoConfig) -> tuple[Population, float]:
    lam_r = float(rng.uniform(config.lambda_r_min, config.lambda_r_max))
    best = pop.members[best_index(pop.members, lam_r)]
    return Population([best] * len(pop.members), pop.iteration), lam_r


def run(
    config: EpoConfig,
    feature_model: FeatureModel,
    feature: FeatureSpec | Feature,
    *,
    fluency_model: FeatureModel | None = None,
    init: Sequence[int] | None = None,
    workers: int = 1,
    observer: Callable[[StepEvent], None] | None = None,
    iteration_log: TextIO | None = None,
) -> RunResult:
    vocab = feature_model.vocab
    if isinstance(feature, FeatureSpec):
        feature = feature.bind(feature_model, config.position_reduction)
    scorer = Scorer(feature_model, feature, fluency_model, workers)
    grid = config.grid()
    patterns = config.reject_substrings
    reject_mask = rejected_tokens(vocab, patterns) if patterns else None
    if config.n > feature_model.n_max:
        raise InputError(f"prompt length {config.n} exceeds the model's n_max={feature_model.n_max}")

    archive = ParetoArchive()
    records: list[IterationRecord] = []
    pop = Population(scorer.score(init_population(config, vocab, init)), 0)
    for sp in pop.members:
        archive.insert(sp, 0)
    result = RunResult(archive, records, pop, grid, vocab, feature, config)

    try:
        for it in range(1, config.T + 1):
            restarted = config.T_restart > 0 and it % config.T_restart == 0
            lam_r = None
            if restarted:
                pop, lam_r = restart(pop, stream(config.seed, _RESTART, it, 0), config)
            grads = scorer.gradients(pop.ids(), grid.lambdas)
            children: list[TokenSequence] = []
            for slot, member in enumerate(pop.members):
                rng = stream(config.seed, _CHILDREN, it, slot)
                children += propose_children(member, grads[slot], config, rng, reject_mask)
            pool = scorer.score(children)
            if config.include_parents:
                pool += pop.members
            if patterns:
                pool = [sp for sp in pool if not text_rejected(vocab.decode(sp.seq), patterns)]
            if not pool:
                raise EngineError(f"iteration {it}: every candidate was rejected")
            for sp in pool:
                archive.insert(sp, it)
            parents = pop
            pop = Population(select(pool, grid), it)
            rec = IterationRecord(it, grid.lambdas, pop.members, restarted, lam_r)
            records.append(rec)
            result.final_population = pop
            if iteration_log is not None:
                iteration_log.write(json.dumps(rec.to_json(vocab), ensure_ascii=False) + "\n")
            if observer is not None:
                observer(StepEvent(it, parents, restarted, lam_r, pool, pop, archive))
    except EpoError as e:
        raise RunAborted(str(e), result) from e
    return result
