"""Differentiable feature models.

A :class:`FeatureModel` maps a (possibly relaxed, row-stochastic) one-hot
prompt matrix to next-token logits plus the internal activations that
features read. Every prompt is scored with a BOS token prepended, so an
``n``-token prompt gets exactly ``n`` cross-entropy terms.

The reference :class:`ToyTransformer` is a pre-norm decoder-only transformer
with learned positional embeddings and a GELU MLP, computed in float64.

Weight file layout (all little-endian)::

    b"EPOW"  u32 version  u32 V, d, h, layers, heads, n_max, seed
    float64 arrays, row-major, in this order:
        tok_emb (V, d)             pos_emb (n_max + 1, d)
        per layer:
            ln1_g (d)  ln1_b (d)  w_qkv (d, 3d)  b_qkv (3d)  w_o (d, d)  b_o (d)
            ln2_g (d)  ln2_b (d)  w_in (d, h)    b_in (h)    w_out (h, d) b_out (d)
        lnf_g (d)  lnf_b (d)  w_u (d, V)  b_u (V)
    u32 length, then that many bytes of UTF-8 JSON holding the vocabulary
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import InputError, ModelError, Vocabulary

log = logging.getLogger(__name__)

DTYPE = torch.float64
MAGIC = b"EPOW"
VERSION = 1
LN_EPS = 1e-5


@dataclass
class ModelOutputs:
    """Per-prompt-position outputs. Tensors may carry a leading batch dimension.

    ``logits[i]`` is the next-token distribution after prompt token ``i``;
    ``ce_terms[j]`` is ``-log p(token j | BOS, tokens < j)``.
    """

    logits: torch.Tensor
    residual: list[torch.Tensor]
    mlp_acts: list[torch.Tensor]
    ce_terms: torch.Tensor
    bos_logits: torch.Tensor

    @property
    def mean_ce(self) -> torch.Tensor:
        return self.ce_terms.mean(dim=-1)


@dataclass
class OneHotGradient:
    grad: np.ndarray
    objective_value: float


@dataclass(frozen=True)
class ToyTransformerSpec:
    V: int
    d: int = 32
    h: int = 128
    layers: int = 2
    heads: int = 4
    n_max: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("V", "d", "h", "layers", "heads", "n_max"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d % self.heads:
            raise ModelError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0 <= self.seed < 2**32:
            raise ModelError("seed must fit in u32")

    def fields(self) -> tuple[int, ...]:
        return (self.V, self.d, self.h, self.layers, self.heads, self.n_max, self.seed)


class FeatureModel(torch.nn.Module):
    """Base class: subclasses implement :meth:`run` on relaxed inputs."""

    vocab: Vocabulary
    n_max: int

    def run(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
        """``x`` is (B, n, V). Returns logits over all n+1 positions (BOS first), residuals, MLP acts."""
        raise NotImplementedError

    @property
    def n_layers(self) -> int:
        raise NotImplementedError

    def onehot(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
        return F.one_hot(ids, self.vocab.size).to(DTYPE)

    def relaxed(self, x: torch.Tensor) -> ModelOutputs:
        """Outputs for a relaxed input ``x`` of shape (B, n, V).

        Cross-entropy against a relaxed row is ``-sum_v x[j, v] log p_j(v)``,
        which equals the usual term at one-hot rows.
        """
        if x.ndim != 3 or x.shape[-1] != self.vocab.size:
            raise InputError(f"expected (B, n, {self.vocab.size}) input, got {tuple(x.shape)}")
        n = x.shape[1]
        if n < 1:
            raise InputError("empty prompt")
        if n > self.n_max:
            raise InputError(f"prompt length {n} exceeds n_max={self.n_max}")
        all_logits, residual, mlp_acts = self.run(x)
        logp = torch.log_softmax(all_logits[:, :n], dim=-1)
        ce = -(x * logp).sum(dim=-1)
        return ModelOutputs(
            logits=all_logits[:, 1:],
            residual=[r[:, 1:] for r in residual],
            mlp_acts=[a[:, 1:] for a in mlp_acts],
            ce_terms=ce,
            bos_logits=all_logits[:, 0],
        )

    @torch.no_grad()
    def forward_batch(self, ids) -> ModelOutputs:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise InputError("forward_batch expects a (B, n) id array")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise InputError("token id outside vocabulary")
        return self.relaxed(self.onehot(ids))

    def forward(self, seq: Sequence[int]) -> ModelOutputs:  # type: ignore[override]
        out = self.forward_batch([list(seq)])
        return _unbatch(out)

    def cross_entropy_terms(self, seq: Sequence[int]) -> np.ndarray:
        return self.forward(seq).ce_terms.numpy()

    def grad_onehot(self, seq: Sequence[int], objective: Callable[[ModelOutputs], torch.Tensor]) -> OneHotGradient:
        """Gradient of ``objective`` w.r.t. the one-hot prompt matrix, evaluated at ``seq``."""
        x = self.onehot([list(seq)]).requires_grad_(True)
        value = objective(_unbatch(self.relaxed(x)))
        value = _as_scalar(value)
        if not value.requires_grad:
            return OneHotGradient(np.zeros((len(seq), self.vocab.size)), float(value))
        (g,) = torch.autograd.grad(value, x)
        return OneHotGradient(g[0].numpy(), float(value.detach()))


def _as_scalar(value) -> torch.Tensor:
    if isinstance(value, (int, float)):
        return torch.tensor(float(value), dtype=DTYPE)
    if not isinstance(value, torch.Tensor):
        raise TypeError(f"objective must return a torch scalar, got {type(value).__name__}")
    if value.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(value.shape)}")
    return value.reshape(())


def _unbatch(out: ModelOutputs) -> ModelOutputs:
    return ModelOutputs(
        logits=out.logits[0],
        residual=[r[0] for r in out.residual],
        mlp_acts=[a[0] for a in out.mlp_acts],
        ce_terms=out.ce_terms[0],
        bos_logits=out.bos_logits[0],
    )


def _param_shapes(spec: ToyTransformerSpec) -> list[tuple[str, tuple[int, ...]]]:
    V, d, h = spec.V, spec.d, spec.h
    shapes = [("tok_emb", (V, d)), ("pos_emb", (spec.n_max + 1, d))]
    for l in range(spec.layers):
        shapes += [
            (f"b{l}_ln1_g", (d,)), (f"b{l}_ln1_b", (d,)),
            (f"b{l}_w_qkv", (d, 3 * d)), (f"b{l}_b_qkv", (3 * d,)),
            (f"b{l}_w_o", (d, d)), (f"b{l}_b_o", (d,)),
            (f"b{l}_ln2_g", (d,)), (f"b{l}_ln2_b", (d,)),
            (f"b{l}_w_in", (d, h)), (f"b{l}_b_in", (h,)),
            (f"b{l}_w_out", (h, d)), (f"b{l}_b_out", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_u", (d, V)), ("b_u", (V,))]
    return shapes


def _init_array(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("_g"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if name in ("tok_emb", "pos_emb"):
        return rng.standard_normal(shape)
    return rng.standard_normal(shape) / math.sqrt(shape[0])


class ToyTransformer(FeatureModel):
    def __init__(self, spec: ToyTransformerSpec, vocab: Vocabulary, weights: dict[str, np.ndarray] | None = None):
        super().__init__()
        if vocab.size != spec.V:
            raise ModelError(f"vocabulary size {vocab.size} != spec.V {spec.V}")
        self.spec = spec
        self.vocab = vocab
        self.n_max = spec.n_max
        if weights is None:
            rng = np.random.default_rng(spec.seed)
            weights = {name: _init_array(name, shape, rng) for name, shape in _param_shapes(spec)}
        self.names = [name for name, _ in _param_shapes(spec)]
        for name, shape in _param_shapes(spec):
            w = np.asarray(weights[name], dtype=np.float64)
            if w.shape != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {w.shape}")
            self.register_parameter(name, torch.nn.Parameter(torch.tensor(w, dtype=DTYPE), requires_grad=False))
        mask = torch.triu(torch.ones(spec.n_max + 1, spec.n_max + 1, dtype=torch.bool), diagonal=1)
        self.register_buffer("_mask", mask, persistent=False)

    @property
    def n_layers(self) -> int:
        return self.spec.layers

    def p(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def weights(self) -> dict[str, np.ndarray]:
        return {name: self.p(name).detach().numpy().copy() for name in self.names}

    def _ln(self, x, prefix):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + LN_EPS) * self.p(prefix + "_g") + self.p(prefix + "_b")

    def _attn(self, x, l):
        B, L, d = x.shape
        H = self.spec.heads
        qkv = x @ self.p(f"b{l}_w_qkv") + self.p(f"b{l}_b_qkv")
        q, k, v = (t.reshape(B, L, H, d // H).transpose(1, 2) for t in qkv.split(d, dim=-1))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // H)
        att = att.masked_fill(self._mask[:L, :L], float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        return y @ self.p(f"b{l}_w_o") + self.p(f"b{l}_b_o")

    def run(self, x):
        B, n, _ = x.shape
        emb = self.p("tok_emb")
        bos = emb[self.vocab.bos_id].expand(B, 1, -1)
        h = torch.cat([bos, x @ emb], dim=1) + self.p("pos_emb")[: n + 1]
        residual, acts = [], []
        for l in range(self.spec.layers):
            h = h + self._attn(self._ln(h, f"b{l}_ln1"), l)
            a = F.gelu(self._ln(h, f"b{l}_ln2") @ self.p(f"b{l}_w_in") + self.p(f"b{l}_b_in"))
            h = h + a @ self.p(f"b{l}_w_out") + self.p(f"b{l}_b_out")
            acts.append(a)
            residual.append(h)
        logits = self._ln(h, "lnf") @ self.p("w_u") + self.p("b_u")
        return logits, residual, acts

    def zeroed(self) -> "ToyTransformer":
        return ToyTransformer(self.spec, self.vocab, {k: np.zeros_like(v) for k, v in self.weights().items()})

    # serialization

    def save(self, path: str | Path) -> None:
        path = Path(path)
        parts = [MAGIC, struct.pack("<8I", VERSION, *self.spec.fields())]
        for name in self.names:
            parts.append(np.ascontiguousarray(self.p(name).detach().numpy(), dtype="<f8").tobytes())
        vocab = json.dumps(self.vocab.to_dict(), ensure_ascii=False).encode("utf-8")
        parts += [struct.pack("<I", len(vocab)), vocab]
        path.write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "ToyTransformer":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise ModelError(f"cannot read model {path}: {e.strerror}") from None
        if raw[:4] != MAGIC:
            raise ModelError(f"{path}: not an EPOW weight file")
        version, *fields = struct.unpack_from("<8I", raw, 4)
        if version != VERSION:
            raise ModelError(f"{path}: unsupported weight file version {version}")
        spec = ToyTransformerSpec(*fields)
        off = 4 + 32
        weights = {}
        for name, shape in _param_shapes(spec):
            count = int(np.prod(shape))
            if off + 8 * count > len(raw):
                raise ModelError(f"{path}: truncated at {name}")
            weights[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
        try:
            (vlen,) = struct.unpack_from("<I", raw, off)
            vocab = Vocabulary.from_dict(json.loads(raw[off + 4 : off + 4 + vlen].decode("utf-8")))
        except (struct.error, ValueError, KeyError) as e:
            raise ModelError(f"{path}: bad vocabulary section ({e})") from None
        return cls(spec, vocab, weights)


def file_fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def corpus_cross_entropy(model: FeatureModel, corpus: Sequence[int], window: int, stride: int | None = None) -> float:
    """Mean per-token CE over BOS-prefixed windows of the corpus."""
    stride = stride or window
    corpus = np.asarray(corpus, dtype=np.int64)
    starts = range(0, len(corpus) - window + 1, stride)
    ce = [model.forward_batch(np.stack([corpus[s : s + window] for s in chunk])).ce_terms.numpy()
          for chunk in _chunks(list(starts), 256)]
    return float(np.concatenate(ce).mean())


def _chunks(xs, size):
    for i in range(0, len(xs), size):
        yield xs[i : i + size]


def train_toy(
    spec: ToyTransformerSpec,
    vocab: Vocabulary,
    corpus: Sequence[int],
    steps: int,
    *,
    batch_size: int = 32,
    lr: float = 3e-3,
    init: ToyTransformer | None = None,
) -> ToyTransformer:
    """Fit next-token prediction on BOS-prefixed random windows of ``corpus`` with Adam.

    Deterministic given ``spec.seed``.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    window = spec.n_max
    if len(corpus) == 0:
        raise InputError("empty corpus")
    if len(corpus) < window:
        raise InputError(f"corpus has {len(corpus)} tokens, need at least n_max={window}")
    if corpus.max() >= vocab.size or corpus.min() < 0:
        raise InputError("corpus contains ids outside the vocabulary")
    model = init if init is not None else ToyTransformer(spec, vocab)
    model = ToyTransformer(spec, vocab, model.weights())
    if steps == 0:
        return model
    rng = np.random.default_rng([spec.seed, 1])
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(steps):
        starts = rng.integers(0, len(corpus) - window + 1, size=batch_size)
        batch = np.stack([corpus[s : s + window] for s in starts])
        out = model.relaxed(model.onehot(batch))
        loss = out.ce_terms.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            log.debug("train step %d loss %.4f", step, loss.item())
    for p in model.parameters():
        p.requires_grad_(False)
    return model
