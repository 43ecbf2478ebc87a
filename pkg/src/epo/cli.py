"""``epo`` command line: one subcommand per experiment.

Exit codes: 0 success, 1 engine error (partial results still written),
2 configuration or input error, 3 model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    aggregate_sweep,
    frontier_at,
    layer_sweep,
    read_stats,
    read_sweep_rows,
    slack_curve,
    write_frontier_snapshot,
    write_slack_curve,
    write_stats,
    write_sweep,
)
from .attribution import ATTRIBUTION_HEADER, attribute, csv_rows, render_report
from .baselines import corpus_scan, random_baseline
from .core import ConfigError, EngineError, EpoConfig, EpoError, InputError, ModelError, Vocabulary, load_json_object
from .corpus import GRAMMARS, bundled_corpus_path, byte_vocabulary, load_corpus
from .engine import RunAborted, Scorer, run
from .export import read_history_records, read_jsonl, write_csv, write_frontier, write_history
from .model import ToyTransformer, ToyTransformerSpec, corpus_cross_entropy, file_fingerprint, train_toy
from .objectives import FeatureSpec

log = logging.getLogger("epo")

DATA = Path(__file__).parent / "data"
DEFAULT_MODEL = DATA / "toy64.epow"


def load_run_config(path) -> tuple[EpoConfig, FeatureSpec | None, str | None]:
    """A run config is an :class:`EpoConfig` document plus optional ``feature`` and ``init`` keys."""
    d = load_json_object(path)
    feature = d.pop("feature", None)
    init = d.pop("init", None)
    cfg = EpoConfig.from_dict(d)
    if feature is not None:
        if not isinstance(feature, dict):
            raise ConfigError("'feature' must be an object")
        feature = FeatureSpec.from_dict(feature)
    return cfg, feature, init


def load_model(path) -> ToyTransformer:
    return ToyTransformer.load(path or DEFAULT_MODEL)


class Command:
    """Shared plumbing: output dir, seed override, manifest."""

    def __init__(self, args):
        self.args = args
        self.t0 = time.time()
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.manifest: dict = {"command": args.command, "tool_version": __version__}

    def config(self, require_feature=True):
        if self.args.config is None:
            raise ConfigError("--config is required")
        cfg, feature, init = load_run_config(self.args.config)
        if self.args.seed is not None:
            cfg = replace(cfg, seed=self.args.seed)
        if require_feature and feature is None:
            raise ConfigError(f"{self.args.config}: missing 'feature'")
        self.manifest.update(config=cfg.to_dict(), seed=cfg.seed, config_path=str(self.args.config))
        return cfg, feature, init

    def model(self, attr="model"):
        path = getattr(self.args, attr) or DEFAULT_MODEL
        m = load_model(path)
        self.manifest[attr] = {"path": str(path), "sha256": file_fingerprint(path)}
        return m

    def wrote(self, *names):
        self.outputs += names

    def finish(self, extra: dict | None = None):
        if extra:
            self.manifest.update(extra)
        self.manifest["outputs"] = sorted(self.outputs)
        self.manifest["duration_s"] = round(time.time() - self.t0, 3)
        self.manifest["args"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items()
                                 if k != "func"}
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, default=str) + "\n")


def _scorer(cmd: Command, cfg: EpoConfig, feature: FeatureSpec):
    model = cmd.model()
    fluency = cmd.model("fluency_model") if cmd.args.fluency_model else None
    bound = feature.bind(model, cfg.position_reduction)
    cmd.manifest["feature"] = bound.resolved_spec().to_dict()
    return model, fluency, bound, Scorer(model, bound, fluency, cmd.args.workers)


def cmd_dream(args) -> int:
    cmd = Command(args)
    cfg, feature, init = cmd.config()
    model, fluency, bound, _ = _scorer(cmd, cfg, feature)
    init_ids = model.vocab.encode(init) if init is not None else None
    code = 0
    with open(cmd.out / "iterations.jsonl", "w", encoding="utf-8") as itlog:
        try:
            res = run(cfg, model, bound, fluency_model=fluency, init=init_ids, workers=args.workers,
                      iteration_log=itlog)
        except RunAborted as e:
            print(f"epo: engine error: {e}", file=sys.stderr)
            res, code = e.partial, 1
    write_frontier(cmd.out, res.archive, model.vocab)
    write_history(cmd.out / "history.jsonl", res.archive, model.vocab)
    cmd.wrote("iterations.jsonl", "frontier.csv", "frontier.jsonl", "history.jsonl")
    cmd.finish({"completed_iterations": len(res.per_iteration_log), "lambdas": list(res.grid.lambdas)})
    return code


def cmd_random(args) -> int:
    cmd = Command(args)
    cfg, feature, _ = cmd.config()
    *_, scorer = _scorer(cmd, cfg, feature)
    stats, values = random_baseline(scorer, cfg.n, args.n_samples, cfg.seed)
    write_stats(cmd.out / "random_baseline.csv", stats)
    write_csv(cmd.out / "random_samples.csv", ("sample", "feature"), ((i, float(v)) for i, v in enumerate(values)))
    cmd.wrote("random_baseline.csv", "random_samples.csv")
    if stats.sigma_random == 0:
        print("epo: warning: random baseline is degenerate (sigma = 0); z-scores are undefined", file=sys.stderr)
    cmd.finish({"degenerate": stats.sigma_random == 0})
    return 0


def cmd_scan(args) -> int:
    cmd = Command(args)
    cfg, feature, _ = cmd.config()
    model, _, _, scorer = _scorer(cmd, cfg, feature)
    corpus_path = args.corpus or bundled_corpus_path()
    try:
        corpus = load_corpus(corpus_path, model.vocab)
    except OSError as e:
        raise InputError(f"cannot read corpus {corpus_path}: {e.strerror}") from None
    res = corpus_scan(scorer, corpus, cfg.n, args.top_n, args.stride)
    write_csv(cmd.out / "scan.csv", ("rank", "start", "feature", "mean_ce", "text"),
              ((i, h.start, h.feature, h.mean_ce, h.text) for i, h in enumerate(res.top)))
    cmd.wrote("scan.csv")
    cmd.finish({"corpus": {"path": str(corpus_path), "sha256": file_fingerprint(corpus_path)},
                "n_windows": res.n_windows})
    return 0


def cmd_attribute(args) -> int:
    cmd = Command(args)
    cfg, feature, init = cmd.config()
    model, _, _, scorer = _scorer(cmd, cfg, feature)
    text = args.prompt if args.prompt is not None else init
    if text is None:
        raise ConfigError("attribute needs --prompt or an 'init' prompt in the config")
    seq = model.vocab.encode(text)
    rows = attribute(scorer, seq, args.k, cfg.grad_ranking)
    write_csv(cmd.out / "attribution.csv", ATTRIBUTION_HEADER, csv_rows(rows))
    doc = render_report(rows, {"prompt": model.vocab.decode(seq), "feature": json.dumps(cmd.manifest["feature"]),
                               "k": args.k})
    (cmd.out / "attribution.html").write_text(doc, encoding="utf-8")
    cmd.wrote("attribution.csv", "attribution.html")
    cmd.finish()
    return 0


def _parse_floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def cmd_analyze(args) -> int:
    cmd = Command(args)
    run_dir = Path(args.run)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        records = read_jsonl(run_dir / "history.jsonl")
    except (OSError, ValueError) as e:
        raise InputError(f"{run_dir} is not a dream output directory ({e})") from None
    history = read_history_records(records)
    texts = {tuple(r["ids"]): r["text"] for r in records}
    T = manifest["completed_iterations"]
    checkpoints = [int(c) for c in _parse_floats(args.checkpoints)] if args.checkpoints else sorted({0, T // 4, T // 2, 3 * T // 4, T})
    for c in checkpoints:
        if not 0 <= c <= T:
            raise InputError(f"checkpoint {c} outside [0, {T}]")
        write_frontier_snapshot(cmd.out / f"frontier_{c}.csv", frontier_at(history, c), texts.__getitem__)
        cmd.wrote(f"frontier_{c}.csv")
    if args.baseline:
        stats = read_stats(args.baseline)
        slacks = _parse_floats(args.slacks) if args.slacks else [x / 2 for x in range(17)]
        write_slack_curve(cmd.out / "slack_curve.csv", slack_curve(history, stats, slacks))
        cmd.wrote("slack_curve.csv")
    if args.sweep:
        rows = read_sweep_rows(args.sweep)
        agg = aggregate_sweep(rows)
        write_csv(cmd.out / "layer_sweep.csv", ("layer", "mean_z", "std_z", "n_directions"),
                  ((a.layer, a.mean_z, a.std_z, a.n_directions) for a in agg))
        cmd.wrote("layer_sweep.csv")
    cmd.finish({"run": str(run_dir), "checkpoints": checkpoints})
    return 0


def cmd_sweep(args) -> int:
    cmd = Command(args)
    cfg, _, _ = cmd.config(require_feature=False)
    model = cmd.model()
    fluency = cmd.model("fluency_model") if args.fluency_model else None
    layers = [int(x) for x in _parse_floats(args.layers)] if args.layers else list(range(model.n_layers))
    rows, agg = layer_sweep(model, layers, args.directions, cfg, fluency_model=fluency, n_random=args.n_samples,
                            workers=args.workers)
    write_sweep(cmd.out, rows, agg)
    cmd.wrote("layer_sweep.csv", "layer_sweep_directions.csv")
    cmd.finish({"layers": layers, "directions_per_layer": args.directions})
    return 0


def cmd_train_toy(args) -> int:
    cmd = Command(args)
    opts = {"V": None, "d": 32, "h": 64, "layers": 4, "heads": 4, "n_max": 16, "steps": 3000, "batch_size": 32,
            "lr": 3e-3, "grammar": "toy", "corpus_tokens": 200_000, "heldout_tokens": 10_000, "tokenizer": "word"}
    if args.config:
        d = load_json_object(args.config)
        unknown = sorted(set(d) - set(opts))
        if unknown:
            raise ConfigError(f"unknown train-toy keys: {', '.join(unknown)}")
        opts.update(d)
    seed = args.seed if args.seed is not None else 0
    if args.corpus:
        if opts["tokenizer"] == "byte":
            vocab = byte_vocabulary()
        else:
            words = sorted(set(Path(args.corpus).read_text(encoding="utf-8").split()) - {"<s>"})
            vocab = Vocabulary(tuple(words) + ("<s>",), bos_id=len(words))
        ids = load_corpus(args.corpus, vocab)
        split = max(len(ids) - opts["heldout_tokens"], len(ids) * 9 // 10)
        train, held = ids[:split], ids[split:]
        cmd.manifest["corpus"] = {"path": str(args.corpus), "sha256": file_fingerprint(args.corpus)}
    else:
        if opts["grammar"] not in GRAMMARS:
            raise ConfigError(f"grammar must be one of {sorted(GRAMMARS)}")
        g = GRAMMARS[opts["grammar"]]
        vocab = g.vocabulary()
        train = g.generate(opts["corpus_tokens"], seed)
        held = g.generate(opts["heldout_tokens"], seed + 1)
        (cmd.out / "corpus.txt").write_text(vocab.decode(train) + "\n", encoding="utf-8")
        cmd.wrote("corpus.txt")
    if opts["V"] not in (None, vocab.size):
        raise ConfigError(f"config V={opts['V']} but the vocabulary has {vocab.size} tokens")
    try:
        spec = ToyTransformerSpec(vocab.size, opts["d"], opts["h"], opts["layers"], opts["heads"], opts["n_max"], seed)
    except ModelError as e:
        raise ConfigError(str(e)) from None
    before = ToyTransformer(spec, vocab)
    model = train_toy(spec, vocab, train, opts["steps"], batch_size=opts["batch_size"], lr=opts["lr"])
    model.save(cmd.out / "model.epow")
    window = min(12, spec.n_max)
    rand = np.random.default_rng([seed, 3]).integers(0, vocab.size, size=len(held))
    metrics = {
        "heldout_ce_before": corpus_cross_entropy(before, held, window),
        "heldout_ce_after": corpus_cross_entropy(model, held, window),
        "random_ce_after": corpus_cross_entropy(model, rand, window),
        "log_V": math.log(vocab.size),
    }
    write_csv(cmd.out / "train_metrics.csv", tuple(metrics), [tuple(metrics.values())])
    cmd.wrote("model.epow", "train_metrics.csv")
    cmd.finish({"spec": asdict(spec), "train_options": opts, "metrics": metrics,
                "model": {"path": str(cmd.out / "model.epow"), "sha256": file_fingerprint(cmd.out / "model.epow")}})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epo", description="Fluent feature dreaming for language models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, model=True):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", type=Path, help="run config JSON")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--workers", type=int, default=1)
        if model:
            s.add_argument("--model", type=Path, help="EPOW weight file (default: bundled toy model)")
            s.add_argument("--fluency-model", type=Path, help="separate model for cross-entropy")
        s.set_defaults(func=func)
        return s

    add("dream", cmd_dream, "run EPO on a feature")
    s = add("random", cmd_random, "uniform random prompt baseline")
    s.add_argument("--n-samples", type=int, default=1024)
    s = add("scan", cmd_scan, "max-activating corpus windows")
    s.add_argument("--corpus", type=Path, help="UTF-8 text or little-endian u32 .bin (default: bundled corpus)")
    s.add_argument("--top-n", type=int, default=64)
    s.add_argument("--stride", type=int, default=1)
    s = add("attribute", cmd_attribute, "token attribution for one prompt")
    s.add_argument("--prompt", help="prompt text (default: config 'init')")
    s.add_argument("--k", type=int, default=32)
    s = add("analyze", cmd_analyze, "frontier snapshots, slack curve and sweep tables from exported logs", model=False)
    s.add_argument("--run", type=Path, required=True, help="dream output directory")
    s.add_argument("--baseline", type=Path, help="random_baseline.csv for the slack curve")
    s.add_argument("--checkpoints", help="comma-separated iterations")
    s.add_argument("--slacks", help="comma-separated slack values in random sigmas")
    s.add_argument("--sweep", type=Path, help="layer_sweep_directions.csv to aggregate")
    s = add("sweep", cmd_sweep, "residual alignment z-scores across layers")
    s.add_argument("--layers", help="comma-separated layer indices (default: all)")
    s.add_argument("--directions", type=int, default=5)
    s.add_argument("--n-samples", type=int, default=1024)
    s = add("train-toy", cmd_train_toy, "train a toy fluency model", model=False)
    s.add_argument("--corpus", type=Path, help="train on this corpus instead of a synthetic grammar")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"epo: {e}", file=sys.stderr)
        return 2
    except ModelError as e:
        print(f"epo: model error: {e}", file=sys.stderr)
        return 3
    except (EngineError, EpoError) as e:
        print(f"epo: engine error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
