"""Token-level causal attribution and its static HTML rendering.

For each position, the top-k gradient-ranked replacement tokens are
substituted one at a time and the feature re-evaluated. ``delta_worst`` is
the drop caused by the most damaging substitute (token colour) and
``delta_best`` the drop caused by the least damaging one (bar height).
"""

from __future__ import annotations

import html
import json
import re
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import InputError
from .engine import Scorer, topk_candidates


@dataclass(frozen=True)
class AttributionRow:
    position: int
    token_text: str
    original_activation: float
    candidate_tokens: tuple[int, ...]
    candidate_activations: tuple[float, ...]

    @property
    def delta_worst(self) -> float:
        if not self.candidate_activations:
            return 0.0
        return self.original_activation - min(self.candidate_activations)

    @property
    def delta_best(self) -> float:
        if not self.candidate_activations:
            return 0.0
        return self.original_activation - max(self.candidate_activations)


def attribute(scorer: Scorer, seq: Sequence[int], k: int = 32, grad_ranking: str = "signed") -> list[AttributionRow]:
    vocab = scorer.feature_model.vocab
    seq = vocab.check(seq)
    if k < 1:
        raise InputError("k must be positive")
    if k > vocab.size - 1:
        warnings.warn(f"k={k} exceeds the {vocab.size - 1} alternative tokens; clamping", RuntimeWarning, stacklevel=2)
        k = vocab.size - 1
    # feature-only gradient: the same top-k operation the engine uses, at lambda = 0
    grad = scorer.gradients([seq], [0.0])[0]
    cand = topk_candidates(grad, seq, k, grad_ranking)
    n = len(seq)
    subs = np.tile(np.asarray(seq, dtype=np.int64), (n * cand.shape[1], 1))
    pos = np.repeat(np.arange(n), cand.shape[1])
    subs[np.arange(len(subs)), pos] = cand.reshape(-1)
    f_all, _ = scorer.score_arrays(np.vstack([np.asarray([seq]), subs]))
    original, f = float(f_all[0]), f_all[1:].reshape(n, -1)
    return [
        AttributionRow(j, vocab.tokens[seq[j]], original, tuple(int(t) for t in cand[j]), tuple(float(x) for x in f[j]))
        for j in range(n)
    ]


def _norm(values: Sequence[float]) -> list[float]:
    vals = [max(v, 0.0) for v in values]
    top = max(vals, default=0.0)
    return [v / top if top > 0 else 0.0 for v in vals]


def _json_for_html(obj) -> str:
    s = json.dumps(obj, ensure_ascii=False)
    return s.replace("&", "\\u0026").replace("<", "\\u003c").replace(">", "\\u003e")


def rows_to_records(rows: Sequence[AttributionRow]) -> list[dict]:
    out = []
    for r in rows:
        d = asdict(r)
        d["candidate_tokens"] = list(r.candidate_tokens)
        d["candidate_activations"] = list(r.candidate_activations)
        d["delta_worst"] = r.delta_worst
        d["delta_best"] = r.delta_best
        out.append(d)
    return out


def render_report(rows: Sequence[AttributionRow], metadata: dict | None = None, bar_px: int = 40) -> str:
    """A standalone XHTML-compatible document; the rows are embedded as JSON in ``#attribution-data``."""
    if not rows:
        raise InputError("no attribution rows")
    metadata = metadata or {}
    sat = _norm([r.delta_worst for r in rows])
    height = _norm([r.delta_best for r in rows])
    spans = []
    for r, s, h in zip(rows, sat, height):
        spans.append(
            f'<span class="tok" data-pos="{r.position}">'
            f'<span class="bar" style="height:{h * bar_px:.2f}px"></span>'
            f'<span class="txt" style="background-color:rgba(200,0,0,{s:.4f})">{html.escape(r.token_text)}</span>'
            f"</span>"
        )
    table_rows = "".join(
        f"<tr><td>{r.position}</td><td>{html.escape(r.token_text)}</td><td>{r.original_activation:.4f}</td>"
        f"<td>{r.delta_worst:.4f}</td><td>{r.delta_best:.4f}</td></tr>"
        for r in rows
    )
    title = html.escape(str(metadata.get("title", "Token attribution")))
    meta = "".join(f"<li>{html.escape(str(k))}: {html.escape(str(v))}</li>" for k, v in metadata.items())
    return (
        "<!DOCTYPE html>\n"
        '<html xmlns="http://www.w3.org/1999/xhtml"><head><meta charset="utf-8" />'
        f"<title>{title}</title>"
        "<style>"
        ".tokens{display:flex;flex-wrap:wrap;align-items:flex-end;font-family:monospace;font-size:16px}"
        ".tok{display:inline-flex;flex-direction:column;align-items:stretch;margin:0 2px}"
        ".bar{background:#555;display:block}"
        ".txt{padding:1px 3px;white-space:pre}"
        "table{border-collapse:collapse;margin-top:1em}td,th{border:1px solid #ccc;padding:2px 6px}"
        "</style></head><body>"
        f"<h1>{title}</h1><ul>{meta}</ul>"
        f'<div class="tokens">{"".join(spans)}</div>'
        "<table><thead><tr><th>position</th><th>token</th><th>original</th><th>delta_worst</th>"
        f"<th>delta_best</th></tr></thead><tbody>{table_rows}</tbody></table>"
        f'<script type="application/json" id="attribution-data">{_json_for_html(rows_to_records(rows))}</script>'
        "</body></html>\n"
    )


def parse_report(doc: str) -> list[AttributionRow]:
    m = re.search(r'<script type="application/json" id="attribution-data">(.*?)</script>', doc, re.S)
    if m is None:
        raise InputError("no embedded attribution data")
    return [
        AttributionRow(d["position"], d["token_text"], d["original_activation"],
                       tuple(d["candidate_tokens"]), tuple(d["candidate_activations"]))
        for d in json.loads(m.group(1))
    ]


ATTRIBUTION_HEADER = ("position", "token", "original", "delta_worst", "delta_best")


def csv_rows(rows: Sequence[AttributionRow]):
    return [(r.position, r.token_text, r.original_activation, r.delta_worst, r.delta_best) for r in rows]

