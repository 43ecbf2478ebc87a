"""Writers and readers for the run-log formats.

Floats are written with ``repr`` so every value round-trips exactly; that is
what makes offline analysis byte-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import FrontierPoint, HistoryEntry, ParetoArchive, TokenSequence, Vocabulary


def fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def point_record(p: FrontierPoint | HistoryEntry, vocab: Vocabulary) -> dict:
    return {
        "iter": p.iteration,
        "ids": list(p.seq),
        "feature": p.feature,
        "mean_ce": p.mean_ce,
        "text": vocab.decode(p.seq),
    }


FRONTIER_HEADER = ("feature", "mean_ce", "perplexity", "text", "iteration")


def write_frontier_csv(path: str | Path, points: Sequence[FrontierPoint], decode: Callable[[TokenSequence], str]) -> None:
    write_csv(path, FRONTIER_HEADER,
              ((p.feature, p.mean_ce, math.exp(p.mean_ce), decode(p.seq), p.iteration) for p in points))


def write_frontier(out_dir: str | Path, archive: ParetoArchive, vocab: Vocabulary, stem: str = "frontier") -> None:
    out_dir = Path(out_dir)
    pts = archive.sorted_points()
    write_jsonl(out_dir / f"{stem}.jsonl", (point_record(p, vocab) for p in pts))
    write_frontier_csv(out_dir / f"{stem}.csv", pts, vocab.decode)


def write_history(path: str | Path, archive: ParetoArchive, vocab: Vocabulary) -> None:
    write_jsonl(path, (point_record(h, vocab) for h in archive.history))


def read_history_records(records: Iterable[dict]) -> list[HistoryEntry]:
    return [HistoryEntry(tuple(r["ids"]), r["feature"], r["mean_ce"], r["iter"]) for r in records]


def read_history(path: str | Path) -> list[HistoryEntry]:
    return read_history_records(read_jsonl(path))
