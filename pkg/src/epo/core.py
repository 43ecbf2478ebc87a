"""Domain types shared by the engine, baselines and analysis code.

Cross-entropies are in nats throughout, so ``perplexity == exp(mean_ce)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TokenSequence = tuple[int, ...]


class EpoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EpoError):
    pass


class InputError(EpoError, ValueError):
    pass


class ModelError(EpoError):
    pass


class EngineError(EpoError):
    pass


class DegenerateBaselineError(EpoError):
    """Raised when a random baseline has zero spread and z-scores are undefined."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    bos_id: int
    kind: str = "word"

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise InputError("vocabulary is empty")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocabulary tokens must be unique")
        if not 0 <= self.bos_id < len(self.tokens):
            raise InputError(f"bos_id {self.bos_id} outside [0, {len(self.tokens)})")
        if self.kind not in ("word", "byte"):
            raise InputError(f"unknown tokenizer kind {self.kind!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InputError(f"token {token!r} not in vocabulary") from None

    def encode(self, text: str) -> TokenSequence:
        if self.kind == "word":
            return tuple(self.token_id(w) for w in text.split())
        return tuple(text.encode("utf-8"))

    def decode(self, ids: Iterable[int]) -> str:
        ids = [int(i) for i in ids]
        if self.kind == "word":
            return " ".join(self.tokens[i] for i in ids)
        out = bytearray()
        for i in ids:
            if i < 256:
                out.append(i)
            else:
                out.extend(self.tokens[i].encode("utf-8"))
        return out.decode("utf-8", errors="replace")

    def check(self, seq: Sequence[int]) -> TokenSequence:
        seq = tuple(int(i) for i in seq)
        bad = [i for i in seq if not 0 <= i < self.size]
        if bad:
            raise InputError(f"token ids {bad} outside [0, {self.size})")
        return seq

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "bos_id": self.bos_id, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), int(d["bos_id"]), d.get("kind", "word"))


@dataclass(frozen=True)
class ScoredPrompt:
    seq: TokenSequence
    feature: float
    ce_terms: tuple[float, ...]
    mean_ce: float = field(init=False, compare=False)

    def __post_init__(self):
        if not self.ce_terms:
            raise InputError("a scored prompt needs at least one cross-entropy term")
        object.__setattr__(self, "mean_ce", math.fsum(self.ce_terms) / len(self.ce_terms))

    @property
    def perplexity(self) -> float:
        return math.exp(self.mean_ce)


def combined_objective(sp: ScoredPrompt, lam: float) -> float:
    """Feature minus ``lam`` times the prompt's mean self-cross-entropy."""
    return sp.feature - lam * sp.mean_ce


@dataclass(frozen=True)
class LambdaGrid:
    lambdas: tuple[float, ...]

    def __len__(self):
        return len(self.lambdas)

    def __iter__(self):
        return iter(self.lambdas)

    def __getitem__(self, i):
        return self.lambdas[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.lambdas, dtype=np.float64)


def lambda_grid(M: int, lo: float, hi: float) -> LambdaGrid:
    """``M`` regularisation strengths evenly spaced in log between ``lo`` and ``hi``.

    ``lo == hi == 0`` with ``M == 1`` is accepted as the unregularised (plain
    greedy coordinate gradient) case.
    """
    if M < 1:
        raise ConfigError(f"lambda grid needs M >= 1, got {M}")
    if M == 1 and lo == 0 and hi == 0:
        return LambdaGrid((0.0,))
    if lo <= 0 or hi <= 0:
        raise ConfigError(f"lambda grid endpoints must be positive, got ({lo}, {hi})")
    if lo > hi:
        raise ConfigError(f"lambda_lo {lo} exceeds lambda_hi {hi}")
    if M == 1:
        return LambdaGrid((float(lo),))
    a, b = math.log(lo), math.log(hi)
    # clamped so rounding in exp(log(x)) cannot break monotonicity; endpoints pinned exactly
    lams = [min(max(math.exp(a + i / (M - 1) * (b - a)), lo), hi) for i in range(M)]
    lams[0], lams[-1] = float(lo), float(hi)
    return LambdaGrid(tuple(lams))


REDUCTIONS = ("max", "last", "mean")


@dataclass
class EpoConfig:
    """Engine hyperparameters. Defaults are tuned for 12-token prompts."""

    T: int = 300
    M: int = 8
    r: int = 32
    k: int = 512
    lambda_lo: float = 0.1
    lambda_hi: float = 10.0
    lambda_r_min: float = 0.667
    lambda_r_max: float = 6.0
    T_restart: int = 30  # 0 disables restarts
    n: int = 12
    seed: int = 0
    reject_substrings: list[str] = field(default_factory=list)
    position_reduction: str = "max"
    include_parents: bool = False
    grad_ranking: str = "signed"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("M", "r", "k", "n"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("T", "T_restart", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if self.lambda_r_min > self.lambda_r_max:
            raise ConfigError("lambda_r_min must not exceed lambda_r_max")
        if self.lambda_r_min < 0:
            raise ConfigError("restart lambdas must be non-negative")
        if self.position_reduction not in REDUCTIONS:
            raise ConfigError(f"position_reduction must be one of {REDUCTIONS}")
        if self.grad_ranking not in ("signed", "abs"):
            raise ConfigError("grad_ranking must be 'signed' or 'abs'")
        if not all(isinstance(s, str) and s for s in self.reject_substrings):
            raise ConfigError("reject_substrings must be non-empty strings")
        self.grid()  # endpoint checks

    def grid(self) -> LambdaGrid:
        return lambda_grid(self.M, self.lambda_lo, self.lambda_hi)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> "EpoConfig":
        return cls.from_dict(load_json_object(path))


def load_json_object(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


@dataclass(frozen=True)
class FrontierPoint:
    feature: float
    mean_ce: float
    seq: TokenSequence
    iteration: int

    def dominates(self, feature: float, mean_ce: float) -> bool:
        return (
            self.feature >= feature
            and self.mean_ce <= mean_ce
            and (self.feature > feature or self.mean_ce < mean_ce)
        )


@dataclass(frozen=True)
class HistoryEntry:
    seq: TokenSequence
    feature: float
    mean_ce: float
    iteration: int


class ParetoArchive:
    """Cumulative set of non-dominated (high feature, low cross-entropy) prompts.

    ``history`` keeps the first time each distinct prompt was evaluated.
    """

    def __init__(self, keep_history: bool = True):
        self.points: list[FrontierPoint] = []
        self.keep_history = keep_history
        self._history: dict[TokenSequence, HistoryEntry] = {}

    def __len__(self):
        return len(self.points)

    @property
    def history(self) -> list[HistoryEntry]:
        return list(self._history.values())

    def insert(self, sp: ScoredPrompt, iteration: int) -> bool:
        return self.insert_values(sp.seq, sp.feature, sp.mean_ce, iteration)

    def insert_values(self, seq: TokenSequence, feature: float, mean_ce: float, iteration: int) -> bool:
        if self.keep_history and seq not in self._history:
            self._history[seq] = HistoryEntry(seq, feature, mean_ce, iteration)
        for p in self.points:
            if p.dominates(feature, mean_ce) or (p.feature == feature and p.mean_ce == mean_ce):
                return False
        self.points = [p for p in self.points if not _dominates(feature, mean_ce, p)]
        self.points.append(FrontierPoint(feature, mean_ce, seq, iteration))
        return True

    def sorted_points(self) -> list[FrontierPoint]:
        return sorted(self.points, key=lambda p: (p.mean_ce, -p.feature, p.seq))

    def best(self, lam: float) -> float:
        return max(p.feature - lam * p.mean_ce for p in self.points)


def _dominates(feature: float, mean_ce: float, p: FrontierPoint) -> bool:
    return (
        feature >= p.feature
        and mean_ce <= p.mean_ce
        and (feature > p.feature or mean_ce < p.mean_ce)
    )


def archive_insert(archive: ParetoArchive, sp: ScoredPrompt, iteration: int) -> ParetoArchive:
    archive.insert(sp, iteration)
    return archive
