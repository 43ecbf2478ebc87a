"""Offline analytics over exported run logs: frontier evolution, slack curves, layer sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import RandomBaselineStats, random_baseline, zscore
from .core import DegenerateBaselineError, EpoConfig, FrontierPoint, HistoryEntry, InputError, ParetoArchive
from .engine import Scorer, run
from .export import read_csv, write_csv, write_frontier_csv
from .model import FeatureModel
from .objectives import FeatureSpec

log = logging.getLogger(__name__)


@dataclass
class SlackCurve:
    points: list[tuple[float, float]]


def slack_curve(history: Sequence[HistoryEntry], stats: RandomBaselineStats, slacks: Iterable[float]) -> SlackCurve:
    """Lowest mean cross-entropy among prompts within ``slack`` random-sigmas of the best alignment."""
    if not history:
        raise InputError("empty history")
    if not stats.sigma_random > 0:
        raise DegenerateBaselineError("slack is measured in random-baseline sigmas, which are zero")
    a = np.array([h.feature for h in history])
    ce = np.array([h.mean_ce for h in history])
    best = a.max()
    pts = []
    for s in slacks:
        if s < 0:
            raise InputError("slack must be non-negative")
        pts.append((float(s), float(ce[a >= best - s * stats.sigma_random].min())))
    return SlackCurve(pts)


def max_z_under_ce(history: Sequence[HistoryEntry], stats: RandomBaselineStats, ce_max: float = math.inf) -> float:
    ok = [h.feature for h in history if h.mean_ce < ce_max]
    if not ok:
        return math.nan
    return zscore(max(ok), stats)


def frontier_at(history: Sequence[HistoryEntry], checkpoint: int) -> list[FrontierPoint]:
    archive = ParetoArchive(keep_history=False)
    for h in history:
        if h.iteration <= checkpoint:
            archive.insert_values(h.seq, h.feature, h.mean_ce, h.iteration)
    return archive.sorted_points()


def frontier_evolution(history: Sequence[HistoryEntry], checkpoints: Iterable[int]) -> list[tuple[int, list[FrontierPoint]]]:
    return [(c, frontier_at(history, c)) for c in checkpoints]


def weakly_dominated_by(a: Sequence[FrontierPoint], b: Sequence[FrontierPoint]) -> bool:
    """True if every point of ``a`` is matched or dominated by some point of ``b``."""
    return all(any(q.feature >= p.feature and q.mean_ce <= p.mean_ce for q in b) for p in a)


@dataclass(frozen=True)
class SweepRow:
    layer: int
    direction: int
    max_alignment: float
    mu_random: float
    sigma_random: float
    max_z: float
    error: str = ""


@dataclass(frozen=True)
class SweepAggregate:
    layer: int
    mean_z: float
    std_z: float
    n_directions: int

    @property
    def single_sample(self) -> bool:
        return self.n_directions == 1


def aggregate_sweep(rows: Sequence[SweepRow]) -> list[SweepAggregate]:
    out = []
    for layer in sorted({r.layer for r in rows}):
        z = np.array([r.max_z for r in rows if r.layer == layer and not r.error])
        if len(z) == 0:
            out.append(SweepAggregate(layer, math.nan, math.nan, 0))
            continue
        std = float(np.std(z, ddof=1)) if len(z) > 1 else 0.0
        if len(z) == 1:
            log.warning("layer %d: single direction, std reported as 0", layer)
        out.append(SweepAggregate(layer, float(np.mean(z)), std, len(z)))
    return out


def direction_seed(seed: int, layer: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, layer, j]).generate_state(1)[0])


def layer_sweep(
    model: FeatureModel,
    layers: Sequence[int],
    directions_per_layer: int,
    config: EpoConfig,
    *,
    fluency_model: FeatureModel | None = None,
    n_random: int = 1024,
    workers: int = 1,
) -> tuple[list[SweepRow], list[SweepAggregate]]:
    """EPO max-alignment z-scores for random residual directions at each layer."""
    rows = []
    for layer in layers:
        if not 0 <= layer < model.n_layers:
            raise InputError(f"layer {layer} outside model depth {model.n_layers}")
        for j in range(directions_per_layer):
            spec = FeatureSpec("residual_alignment", layer=layer, direction_seed=direction_seed(config.seed, layer, j))
            feature = spec.bind(model)
            scorer = Scorer(model, feature, fluency_model, workers)
            stats, _ = random_baseline(scorer, config.n, n_random, direction_seed(config.seed, layer, j))
            res = run(replace(config, seed=direction_seed(config.seed + 1, layer, j)), model, feature,
                      fluency_model=fluency_model, workers=workers)
            best = max(h.feature for h in res.archive.history)
            try:
                z, err = zscore(best, stats), ""
            except DegenerateBaselineError as e:
                z, err = math.nan, str(e)
            rows.append(SweepRow(layer, j, best, stats.mu_random, stats.sigma_random, z, err))
    return rows, aggregate_sweep(rows)


SWEEP_DIRECTION_HEADER = ("layer", "direction", "max_alignment", "mu_random", "sigma_random", "max_z", "error")
SWEEP_HEADER = ("layer", "mean_z", "std_z", "n_directions")


def write_sweep(out_dir: str | Path, rows: Sequence[SweepRow], agg: Sequence[SweepAggregate]) -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / "layer_sweep_directions.csv", SWEEP_DIRECTION_HEADER,
              ((r.layer, r.direction, r.max_alignment, r.mu_random, r.sigma_random, r.max_z, r.error) for r in rows))
    write_csv(out_dir / "layer_sweep.csv", SWEEP_HEADER, ((a.layer, a.mean_z, a.std_z, a.n_directions) for a in agg))


def read_sweep_rows(path: str | Path) -> list[SweepRow]:
    return [SweepRow(int(r["layer"]), int(r["direction"]), float(r["max_alignment"]), float(r["mu_random"]),
                     float(r["sigma_random"]), float(r["max_z"]), r["error"]) for r in read_csv(path)]


def write_frontier_snapshot(path: str | Path, points: Sequence[FrontierPoint], decode) -> None:
    """Same layout as the ``frontier.csv`` written by a dream run."""
    write_frontier_csv(path, points, decode)


def write_slack_curve(path: str | Path, curve: SlackCurve) -> None:
    write_csv(path, ("slack", "min_mean_ce"), curve.points)


def read_stats(path: str | Path) -> RandomBaselineStats:
    (r,) = read_csv(path)
    return RandomBaselineStats(float(r["mu_random"]), float(r["sigma_random"]), int(r["n_samples"]),
                               float(r["max_alignment"]))


def write_stats(path: str | Path, stats: RandomBaselineStats) -> None:
    write_csv(path, ("mu_random", "sigma_random", "n_samples", "max_alignment"),
              [(stats.mu_random, stats.sigma_random, stats.n_samples, stats.max_alignment)])

