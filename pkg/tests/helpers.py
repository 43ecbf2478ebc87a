"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np
import torch

from epo.model import FeatureModel


def np_forward(weights: dict, spec, bos_id: int, seq) -> tuple[np.ndarray, list, list]:
    """Plain-numpy re-derivation of the toy transformer (logits over BOS + prompt positions)."""
    erf = np.vectorize(math.erf)

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    ids = [bos_id] + list(seq)
    L, d, H = len(ids), spec.d, spec.heads
    dh = d // H
    h = weights["tok_emb"][ids] + weights["pos_emb"][:L]
    residual, acts = [], []
    for l in range(spec.layers):
        w = {k[len(f"b{l}_"):]: v for k, v in weights.items() if k.startswith(f"b{l}_")}
        x = ln(h, w["ln1_g"], w["ln1_b"])
        qkv = x @ w["w_qkv"] + w["b_qkv"]
        q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        heads = []
        for hh in range(H):
            sl = slice(hh * dh, (hh + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            s = s + np.triu(np.full((L, L), -np.inf), 1)
            p = np.exp(s - s.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            heads.append(p @ v[:, sl])
        h = h + np.concatenate(heads, -1) @ w["w_o"] + w["b_o"]
        pre = ln(h, w["ln2_g"], w["ln2_b"]) @ w["w_in"] + w["b_in"]
        a = 0.5 * pre * (1 + erf(pre / math.sqrt(2)))
        h = h + a @ w["w_out"] + w["b_out"]
        residual.append(h.copy())
        acts.append(a)
    logits = ln(h, weights["lnf_g"], weights["lnf_b"]) @ weights["w_u"] + weights["b_u"]
    return logits, residual, acts


def fd_gradient(model: FeatureModel, seq, objective, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``objective`` on the relaxed one-hot input, all entries in one batch."""
    x0 = model.onehot([list(seq)])[0]
    n, V = x0.shape
    eye = torch.eye(n * V, dtype=x0.dtype).reshape(n * V, n, V)
    xs = torch.cat([x0 + step * eye, x0 - step * eye])
    with torch.no_grad():
        out = model.relaxed(xs)
        vals = objective(out)
    plus, minus = vals[: n * V], vals[n * V :]
    return ((plus - minus) / (2 * step)).reshape(n, V).numpy()


def rel_error(g: np.ndarray, ref: np.ndarray) -> float:
    """Norm-wise relative error; the reference is the finite-difference estimate."""
    denom = max(np.linalg.norm(ref), 1e-12)
    return float(np.linalg.norm(g - ref) / denom)



ACCEPTANCE: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print the verdict for one acceptance criterion, then assert it."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line
