"""Two-stream vision-language model with ITM, CMLM and ITC heads.

Text and region sequences are encoded separately, then fused by co-attention
layers: each stream runs self-attention, cross-attention to the other stream,
and a feed-forward block. The image stream's cross-attention at the penultimate
fusion layer is where token saliency is read from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, UsageError
from .world import DEFAULT_WORLD, VOCAB, DatasetRecord, Vocabulary, WorldConfig, encode_regions


@dataclass(frozen=True)
class VLMArch:
    vocab_size: int = len(VOCAB)
    width: int = 64
    heads: int = 4
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    ffn: int = 128
    max_len: int = 24
    max_regions: int = 16
    n_shapes: int = DEFAULT_WORLD.n_shapes
    n_colors: int = DEFAULT_WORLD.n_colors
    n_sizes: int = DEFAULT_WORLD.n_sizes
    n_cells: int = DEFAULT_WORLD.n_cells

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_world(cls, world: WorldConfig, **kw) -> "VLMArch":
        return cls(n_shapes=world.n_shapes, n_colors=world.n_colors, n_sizes=world.n_sizes,
                   n_cells=world.n_cells, **kw)


@dataclass
class FusionOutput:
    text: Tensor            # (B, n, d) last-layer cross-modal token states
    image: Tensor           # (B, r, d) last-layer cross-modal region states
    text_valid: np.ndarray
    image_valid: np.ndarray
    sal_query: np.ndarray   # (B, h, d_h) visual [CLS] query, penultimate fusion layer
    sal_keys: np.ndarray    # (B, h, n, d_h) text keys, penultimate fusion layer
    image_cls_encoded: np.ndarray  # (B, d) vision-encoder [CLS] output before fusion


class VisionLanguageModel:
    kind = "vlm"

    def __init__(self, arch: VLMArch = VLMArch(), seed: int = 0, init: bool = True):
        if arch.fusion_layers < 2:
            raise UsageError("saliency needs at least two fusion layers")
        self.arch = arch
        self.params: nn.Params = {}
        if init:
            self._init(np.random.default_rng([seed, 303]))

    def _init(self, rng: np.random.Generator) -> None:
        a, p = self.arch, self.params
        d = a.width
        nn.init_embedding(p, "text.tok", a.vocab_size, d, rng)
        nn.init_embedding(p, "text.pos", a.max_len, d, rng)
        for i in range(a.text_layers):
            nn.init_encoder_layer(p, f"text.enc{i}", d, a.ffn, rng)
        nn.init_embedding(p, "vis.cls", 1, d, rng)
        nn.init_embedding(p, "vis.shape", a.n_shapes, d, rng)
        nn.init_embedding(p, "vis.color", a.n_colors, d, rng)
        nn.init_embedding(p, "vis.size", a.n_sizes, d, rng)
        nn.init_embedding(p, "vis.cell", a.n_cells, d, rng)
        for i in range(a.vision_layers):
            nn.init_encoder_layer(p, f"vis.enc{i}", d, a.ffn, rng)
        for layer in range(a.fusion_layers):
            for s in ("t", "v"):
                name = f"fuse{layer}.{s}"
                nn.init_layer_norm(p, name + ".ln_self", d)
                nn.init_attention(p, name + ".self", d, rng)
                nn.init_layer_norm(p, name + ".ln_q", d)
                nn.init_layer_norm(p, name + ".ln_kv", d)
                nn.init_attention(p, name + ".cross", d, rng)
                nn.init_layer_norm(p, name + ".ln_ffn", d)
                nn.init_ffn(p, name + ".ffn", d, a.ffn, rng)
        nn.init_layer_norm(p, "t.lnf", d)
        nn.init_layer_norm(p, "v.lnf", d)
        nn.init_linear(p, "itm.tpool", d, d, rng)
        nn.init_linear(p, "itm.vpool", d, d, rng)
        nn.init_linear(p, "itm.out", 2 * d, 2, rng)
        nn.init_linear(p, "mlm.dense", d, d, rng)
        nn.init_layer_norm(p, "mlm.ln", d)
        p["mlm.bias"] = Tensor(np.zeros(a.vocab_size), requires_grad=True)
        p["itc.beta"] = Tensor(rng.normal(0.0, d ** -0.5, d), requires_grad=True)

    # ------------------------------------------------------------ encoders

    def _embed_regions(self, region_ids: np.ndarray) -> Tensor:
        a, p = self.arch, self.params
        flat = region_ids.reshape(-1)
        if flat.min() < 0 or flat.max() >= 1 + a.n_shapes * a.n_colors * a.n_sizes * a.n_cells:
            raise UsageError("region id out of range")
        # vectorised decode_region; id 0 (visual [CLS]) decodes to zeros and is masked below
        rest, cell = np.divmod(np.maximum(flat - 1, 0), a.n_cells)
        rest, size = np.divmod(rest, a.n_sizes)
        shape, color = np.divmod(rest, a.n_colors)
        is_obj = np.repeat((flat > 0).astype(np.float64)[:, None], a.width, axis=1)
        obj = ad.add(ad.add(ad.embedding(p["vis.shape"], shape), ad.embedding(p["vis.color"], color)),
                     ad.add(ad.embedding(p["vis.size"], size), ad.embedding(p["vis.cell"], cell)))
        cls = ad.embedding(p["vis.cls"], np.zeros(len(flat), dtype=np.int64))
        x = ad.add(ad.mul(obj, Tensor(is_obj)), ad.mul(cls, Tensor(1.0 - is_obj)))
        return ad.reshape(x, region_ids.shape + (a.width,))

    def encode_text(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        a, p = self.arch, self.params
        n = ids.shape[1]
        if n > a.max_len:
            raise UsageError(f"text length {n} exceeds max_len {a.max_len}")
        x = ad.add(ad.embedding(p["text.tok"], ids), ad.take(p["text.pos"], slice(0, n)))
        for i in range(a.text_layers):
            x = nn.encoder_layer(p, f"text.enc{i}", x, valid, a.heads)
        return x

    def encode_image(self, region_ids: np.ndarray, region_valid: np.ndarray) -> Tensor:
        a = self.arch
        if region_ids.shape[1] > a.max_regions:
            raise UsageError(f"{region_ids.shape[1]} regions exceed max_regions {a.max_regions}")
        x = self._embed_regions(region_ids)
        for i in range(a.vision_layers):
            x = nn.encoder_layer(self.params, f"vis.enc{i}", x, region_valid, a.heads)
        return x

    # ------------------------------------------------------------ fusion

    def forward(self, ids, valid, region_ids, region_valid) -> FusionOutput:
        a, p = self.arch, self.params
        ids, valid = np.asarray(ids), np.asarray(valid, dtype=bool)
        region_ids, region_valid = np.asarray(region_ids), np.asarray(region_valid, dtype=bool)
        t = self.encode_text(ids, valid)
        v = self.encode_image(region_ids, region_valid)
        image_cls = v.data[:, 0].copy()
        sal = {}
        for layer in range(a.fusion_layers):
            cache = sal if layer == a.fusion_layers - 2 else None
            t, v = self._fuse(layer, t, v, valid, region_valid, cache)
        t = nn.layer_norm(p, "t.lnf", t)
        v = nn.layer_norm(p, "v.lnf", v)
        B, n = ids.shape
        dh = a.width // a.heads
        q = sal["q"][:, 0].reshape(B, a.heads, dh)
        k = sal["k"].reshape(B, n, a.heads, dh).transpose(0, 2, 1, 3)
        return FusionOutput(t, v, valid, region_valid, q, k, image_cls)

    def _fuse(self, layer, t, v, t_valid, v_valid, sal_cache):
        a, p = self.arch, self.params
        new = {}
        for s, x, other, own_valid, other_valid in (("t", t, v, t_valid, v_valid),
                                                     ("v", v, t, v_valid, t_valid)):
            name = f"fuse{layer}.{s}"
            h = nn.layer_norm(p, name + ".ln_self", x)
            x = ad.add(x, nn.attention(p, name + ".self", h, h, a.heads, own_valid))
            q_in = nn.layer_norm(p, name + ".ln_q", x)
            kv_in = nn.layer_norm(p, name + ".ln_kv", other)
            cache = sal_cache if s == "v" else None
            x = ad.add(x, nn.attention(p, name + ".cross", q_in, kv_in, a.heads, other_valid, cache))
            x = ad.add(x, nn.ffn(p, name + ".ffn", nn.layer_norm(p, name + ".ln_ffn", x)))
            new[s] = x
        return new["t"], new["v"]

    # ------------------------------------------------------------ heads

    def itm_logits(self, out: FusionOutput) -> Tensor:
        p = self.params
        tp = ad.tanh(nn.linear(p, "itm.tpool", ad.take(out.text, (slice(None), 0))))
        vp = ad.tanh(nn.linear(p, "itm.vpool", ad.take(out.image, (slice(None), 0))))
        return nn.linear(p, "itm.out", ad.concat([tp, vp], axis=-1))

    def cmlm_logits(self, out: FusionOutput) -> Tensor:
        p = self.params
        h = nn.layer_norm(p, "mlm.ln", ad.gelu(nn.linear(p, "mlm.dense", out.text)))
        return ad.add(ad.matmul(h, ad.transpose(p["text.tok"])), p["mlm.bias"])

    def itc_logits(self, out: FusionOutput) -> Tensor:
        """``beta^T h_i`` for every token; the probability is its sigmoid."""
        return ad.matmul(out.text, self.params["itc.beta"])

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def copy(self) -> "VisionLanguageModel":
        twin = VisionLanguageModel(self.arch, init=False)
        twin.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return twin


# ---------------------------------------------------------------- batching


def batch_inputs(token_seqs: Sequence[Sequence[int]], scenes, world: WorldConfig = DEFAULT_WORLD,
                 vocab: Vocabulary = VOCAB):
    """Pad token and region sequences: (ids, valid, region_ids, region_valid)."""
    ids, valid = nn.pad_batch(token_seqs, vocab.pad_id)
    regions = [encode_regions(s, world) for s in scenes]
    rids, rvalid = nn.pad_batch(regions, 0)
    return ids, valid, rids, rvalid


def records_inputs(records: Sequence[DatasetRecord], world: WorldConfig = DEFAULT_WORLD):
    return batch_inputs([r.caption.ids for r in records], [r.scene for r in records], world)


# ---------------------------------------------------------------- losses


_D_EPS = np.finfo(np.float64).epsneg  # largest float below 1 is 1 - epsneg


def itc_probability(h, beta) -> np.ndarray | float:
    """``D = sigmoid(beta^T h)``, kept strictly inside (0, 1).

    In float64 the sigmoid rounds to exactly 1 beyond ``z ~ 37`` (and to 0 far
    below), so the result is clamped to ``[epsneg, 1 - epsneg]`` so that both
    ``log D`` and ``log(1 - D)`` stay finite.
    """
    z = np.asarray(h, dtype=np.float64) @ np.asarray(beta, dtype=np.float64)
    d = np.clip(ad.sigmoid(Tensor(np.atleast_1d(z))).data, _D_EPS, 1.0 - _D_EPS)
    return d if np.ndim(z) else float(d[0])


def itc_loss(probs: Tensor, inconsistent: Sequence[int], eval_positions: Sequence[int]) -> Tensor:
    """``-sum_{i not in T} log D_i - sum_{i in T} log(1 - D_i)`` over ``eval_positions``."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    inconsistent, eval_positions = set(inconsistent), list(eval_positions)
    if not inconsistent <= set(eval_positions):
        raise UsageError("inconsistent positions must be evaluation positions")
    pos = [i for i in eval_positions if i not in inconsistent]
    neg = sorted(inconsistent)
    terms = []
    if pos:
        terms.append(ad.sum(ad.log(ad.take(probs, np.array(pos)))))
    if neg:
        terms.append(ad.sum(ad.log(ad.sub(1.0, ad.take(probs, np.array(neg))))))
    if not terms:
        return Tensor(0.0)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.neg(total)


def itc_loss_from_logits(logits: Tensor, consistent: np.ndarray, weights: np.ndarray) -> Tensor:
    """Batched, numerically stable form of :func:`itc_loss` (sum over weighted positions)."""
    return ad.bce_with_logits(logits, consistent, weights)


def cmlm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """``-sum_{i in M} log p(w_i | h_i^VL)``."""
    return ad.cross_entropy(logits, np.asarray(targets), np.asarray(mask, dtype=np.float64))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise UsageError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def itm_loss(model: VisionLanguageModel, token_seqs, scenes, seed,
             world: WorldConfig = DEFAULT_WORLD) -> Tensor:
    """Mean 2-way cross-entropy over matched pairs and caption-shuffled negatives."""
    if len(token_seqs) < 2:
        raise UsageError("ITM needs a batch of at least 2 pairs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = derangement(len(token_seqs), rng)
    seqs = list(token_seqs) + [token_seqs[j] for j in perm]
    ids, valid, rids, rvalid = batch_inputs(seqs, list(scenes) * 2, world)
    logits = model.itm_logits(model.forward(ids, valid, rids, rvalid))
    labels = np.array([1] * len(token_seqs) + [0] * len(token_seqs))
    return ad.mul(ad.cross_entropy(logits, labels), 1.0 / len(labels))


# ---------------------------------------------------------------- saliency


def saliency_from_cache(out: FusionOutput, eligible: np.ndarray) -> np.ndarray:
    """Token saliency: softmax over eligible positions of head-averaged q.K^T.

    ``eligible`` flags the (content) positions that take part; all others get
    weight exactly 0.
    """
    scores = np.einsum("bhd,bhnd->bn", out.sal_query, out.sal_keys) / out.sal_query.shape[1]
    eligible = np.asarray(eligible, dtype=bool)
    scores = np.where(eligible, scores, -np.inf)
    top = np.max(np.where(eligible, scores, -np.inf), axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(eligible, np.exp(scores - top), 0.0)
    z = e.sum(axis=1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def content_flags(ids: np.ndarray, valid: np.ndarray, vocab: Vocabulary = VOCAB) -> np.ndarray:
    return valid & ~np.isin(ids, list(vocab.special_ids))


def extract_saliency(model: VisionLanguageModel, ids, valid, region_ids, region_valid) -> np.ndarray:
    """Per-token saliency ``alpha`` (B, n); zero on special and padding positions."""
    ids = np.asarray(ids)
    out = model.forward(ids, valid, region_ids, region_valid)
    return saliency_from_cache(out, content_flags(ids, np.asarray(valid, dtype=bool)))
