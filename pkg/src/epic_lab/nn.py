"""Transformer building blocks over named parameter dictionaries.

Models keep their weights in a flat ``dict[str, Tensor]``; the block functions
below read the entries under a name prefix. This keeps checkpointing trivial and
lets the same encoder code serve the generator LM and the VLM text encoder.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def init_linear(params: Params, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                gain: float = 1.0) -> None:
    params[name + ".w"] = Tensor(rng.normal(0.0, gain / np.sqrt(d_in), (d_in, d_out)), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_layer_norm(params: Params, name: str, d: int) -> None:
    params[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)


def init_embedding(params: Params, name: str, n: int, d: int, rng: np.random.Generator,
                   std: float | None = None) -> None:
    params[name] = Tensor(rng.normal(0.0, std if std is not None else d ** -0.5, (n, d)),
                          requires_grad=True)


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def layer_norm(p: Params, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"])


def init_attention(params: Params, name: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", d, d, rng)


def attention(p: Params, name: str, x_q: Tensor, x_kv: Tensor, heads: int,
              kv_valid: np.ndarray | None, cache: dict | None = None) -> Tensor:
    """Projected multi-head attention; ``cache`` receives the q/k projections."""
    q = linear(p, name + ".q", x_q)
    k = linear(p, name + ".k", x_kv)
    v = linear(p, name + ".v", x_kv)
    if cache is not None:
        cache["q"], cache["k"] = q.data, k.data
    out = ad.scaled_dot_attention(q, k, v, heads, kv_valid, out_proj=p[name + ".o.w"])
    return ad.add(out, p[name + ".o.b"])


def init_ffn(params: Params, name: str, d: int, hidden: int, rng: np.random.Generator) -> None:
    init_linear(params, name + ".fc1", d, hidden, rng)
    init_linear(params, name + ".fc2", hidden, d, rng)


def ffn(p: Params, name: str, x: Tensor) -> Tensor:
    return linear(p, name + ".fc2", ad.gelu(linear(p, name + ".fc1", x)))


def init_encoder_layer(params: Params, name: str, d: int, hidden: int, rng: np.random.Generator) -> None:
    init_layer_norm(params, name + ".ln1", d)
    init_attention(params, name + ".attn", d, rng)
    init_layer_norm(params, name + ".ln2", d)
    init_ffn(params, name + ".ffn", d, hidden, rng)


def encoder_layer(p: Params, name: str, x: Tensor, valid: np.ndarray, heads: int) -> Tensor:
    """Pre-norm self-attention block."""
    h = layer_norm(p, name + ".ln1", x)
    x = ad.add(x, attention(p, name + ".attn", h, h, heads, valid))
    return ad.add(x, ffn(p, name + ".ffn", layer_norm(p, name + ".ln2", x)))


def pad_batch(seqs, pad_id: int, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns (ids, valid flags)."""
    n = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def parameter_count(params: Params) -> int:
    return int(sum(t.size for t in params.values()))
