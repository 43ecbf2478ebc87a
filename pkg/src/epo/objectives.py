"""Features to dream on. Each maps :class:`ModelOutputs` to a scalar per prompt.

All functions accept outputs with or without a leading batch dimension and
stay differentiable with respect to the (relaxed) one-hot input.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .core import REDUCTIONS, ConfigError, InputError, Vocabulary
from .model import FeatureModel, ModelOutputs

KINDS = ("neuron", "logit_diff", "residual_alignment")


class DegenerateInputWarning(RuntimeWarning):
    pass


def reduce_positions(x: torch.Tensor, reduction: str) -> torch.Tensor:
    """Reduce the last (position) axis."""
    if reduction == "max":
        return x.max(dim=-1).values
    if reduction == "last":
        return x[..., -1]
    if reduction == "mean":
        return x.mean(dim=-1)
    raise InputError(f"unknown reduction {reduction!r}")


def neuron_activation(out: ModelOutputs, layer: int, index: int, reduction: str = "max") -> torch.Tensor:
    if not 0 <= layer < len(out.mlp_acts):
        raise InputError(f"layer {layer} out of range [0, {len(out.mlp_acts)})")
    acts = out.mlp_acts[layer]
    if not 0 <= index < acts.shape[-1]:
        raise InputError(f"neuron {index} out of range [0, {acts.shape[-1]})")
    return reduce_positions(acts[..., index], reduction)


def logit_difference(out: ModelOutputs, g: int) -> torch.Tensor:
    """Final-position logit of ``g`` minus the largest competing logit."""
    last = out.logits[..., -1, :]
    V = last.shape[-1]
    if V < 2:
        raise InputError("logit difference needs at least two tokens")
    if not 0 <= g < V:
        raise InputError(f"target token {g} outside [0, {V})")
    others = torch.cat([last[..., :g], last[..., g + 1 :]], dim=-1)
    return last[..., g] - others.max(dim=-1).values


def standardize(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-vector standardisation over the last axis (population std).

    Returns the standardised tensor and a boolean mask of zero-variance vectors,
    which are mapped to zero.
    """
    mu = x.mean(dim=-1, keepdim=True)
    c = x - mu
    sigma = torch.sqrt((c**2).mean(dim=-1, keepdim=True))
    degenerate = sigma == 0
    safe = torch.where(degenerate, torch.ones_like(sigma), sigma)
    return torch.where(degenerate, torch.zeros_like(c), c / safe), degenerate.squeeze(-1)


def residual_alignment(out: ModelOutputs, layer: int, v, reduction: str = "last") -> torch.Tensor:
    if not 0 <= layer < len(out.residual):
        raise InputError(f"layer {layer} out of range [0, {len(out.residual)})")
    x = out.residual[layer]
    v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    if v.shape != (x.shape[-1],):
        raise InputError(f"direction has shape {tuple(v.shape)}, expected ({x.shape[-1]},)")
    if abs(float(torch.linalg.vector_norm(v)) - 1.0) > 1e-9:
        raise InputError("direction must have unit norm")
    z, degenerate = standardize(x)
    if bool(degenerate.any()):
        warnings.warn("zero-variance residual vector; alignment set to 0", DegenerateInputWarning, stacklevel=2)
    return reduce_positions(z @ v, reduction)


def token_reject(token: int, vocab: Vocabulary, patterns: Iterable[str]) -> bool:
    s = vocab.tokens[token].casefold()
    return any(p.casefold() in s for p in patterns)


def text_rejected(text: str, patterns: Iterable[str]) -> bool:
    s = text.casefold()
    return any(p.casefold() in s for p in patterns)


def rejected_tokens(vocab: Vocabulary, patterns: Iterable[str]) -> np.ndarray:
    """Boolean mask over the vocabulary."""
    patterns = list(patterns)
    return np.array([token_reject(i, vocab, patterns) for i in range(vocab.size)], dtype=bool)


def random_direction(d: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass
class FeatureSpec:
    kind: str
    layer: int | None = None
    index: int | None = None
    target: int | None = None
    direction: np.ndarray | None = None
    direction_seed: int | None = None
    reduction: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"feature kind must be one of {KINDS}, got {self.kind!r}")
        if self.reduction is not None and self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.kind == "neuron" and (self.layer is None or self.index is None):
            raise ConfigError("neuron feature needs 'layer' and 'index'")
        if self.kind == "logit_diff" and self.target is None:
            raise ConfigError("logit_diff feature needs 'target'")
        if self.kind == "residual_alignment":
            if self.layer is None:
                raise ConfigError("residual_alignment feature needs 'layer'")
            if self.direction is None and self.direction_seed is None:
                raise ConfigError("residual_alignment needs 'direction' or 'direction_seed'")
            if self.direction is not None:
                self.direction = np.asarray(self.direction, dtype=np.float64)
                if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
                    raise ConfigError("residual direction must have unit norm")

    def effective_reduction(self, default: str = "max") -> str:
        if self.reduction is not None:
            return self.reduction
        # final position is the one that drives next-token prediction
        return "last" if self.kind == "residual_alignment" else default

    def bind(self, model: FeatureModel, default_reduction: str = "max") -> "Feature":
        if self.kind in ("neuron", "residual_alignment") and not 0 <= self.layer < model.n_layers:
            raise InputError(f"layer {self.layer} out of range for a {model.n_layers}-layer model")
        if self.kind == "logit_diff":
            if not isinstance(self.target, int):
                self.target = model.vocab.token_id(self.target)
            if not 0 <= self.target < model.vocab.size:
                raise InputError(f"target {self.target} outside vocabulary")
        direction = self.direction
        if self.kind == "residual_alignment" and direction is None:
            d = model.run(model.onehot([[model.vocab.bos_id]]))[1][self.layer].shape[-1]
            direction = random_direction(d, self.direction_seed)
        return Feature(self, self.effective_reduction(default_reduction), direction)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in ("layer", "index", "target", "direction_seed", "reduction"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.direction is not None:
            d["direction"] = [float(x) for x in self.direction]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        allowed = {"kind", "layer", "index", "target", "direction", "direction_seed", "reduction"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown feature keys: {', '.join(unknown)}")
        if "kind" not in d:
            raise ConfigError("feature needs a 'kind'")
        return cls(**d)


@dataclass
class Feature:
    """A :class:`FeatureSpec` resolved against a model (random directions drawn, reduction fixed)."""

    spec: FeatureSpec
    reduction: str
    direction: np.ndarray | None = None

    def __call__(self, out: ModelOutputs) -> torch.Tensor:
        s = self.spec
        if s.kind == "neuron":
            return neuron_activation(out, s.layer, s.index, self.reduction)
        if s.kind == "logit_diff":
            return logit_difference(out, s.target)
        return residual_alignment(out, s.layer, self.direction, self.reduction)

    def resolved_spec(self) -> FeatureSpec:
        s = self.spec
        return FeatureSpec(s.kind, s.layer, s.index, s.target,
                           self.direction if s.kind == "residual_alignment" else None,
                           None if s.kind != "residual_alignment" else s.direction_seed,
                           self.reduction)


def fluency_objective(out: ModelOutputs) -> torch.Tensor:
    return out.mean_ce


def lagrangian(feature: Feature, lam: float):
    """Scalar objective ``f - lam * mean_ce`` for :meth:`FeatureModel.grad_onehot`."""

    def objective(out: ModelOutputs) -> torch.Tensor:
        return feature(out) - lam * out.mean_ce

    return objective
