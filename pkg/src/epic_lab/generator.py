"""Auxiliary masked language model that manufactures inconsistent tokens.

The generator fills masked caption slots by sampling from its MLM distribution
``softmax(e(w)^T h_i)`` (tied token embeddings). Positions where the sample
differs from the original token become the inconsistent set used by the
image-token consistency loss. Several generator strategies are supported; see
:func:`make_generator`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor, UsageError
from .world import VOCAB, Vocabulary


class ConfigurationError(RuntimeError):
    """A strategy's required asset is missing or inconsistent."""


@dataclass(frozen=True)
class LMArch:
    vocab_size: int = len(VOCAB)
    width: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    max_len: int = 24

    def to_dict(self) -> dict:
        return asdict(self)


class GeneratorLM:
    """BERT-like encoder whose MLM head reuses the token embedding table."""

    kind = "lm"

    def __init__(self, arch: LMArch = LMArch(), seed: int = 0, init: bool = True):
        self.arch = arch
        self.params: nn.Params = {}
        if init:
            rng = np.random.default_rng([seed, 101])
            p = self.params
            nn.init_embedding(p, "tok", arch.vocab_size, arch.width, rng)
            nn.init_embedding(p, "pos", arch.max_len, arch.width, rng)
            for i in range(arch.layers):
                nn.init_encoder_layer(p, f"enc{i}", arch.width, arch.ffn, rng)
            nn.init_layer_norm(p, "lnf", arch.width)

    def hidden(self, ids: np.ndarray, valid: np.ndarray,
               first_feature: np.ndarray | None = None) -> Tensor:
        """Contextual states ``H^L`` of shape ``(B, n, width)``.

        ``first_feature`` (``(B, width)``) replaces the input at position 0; it is
        treated as a constant, so no gradient flows back to its producer.
        """
        ids = np.asarray(ids)
        B, n = ids.shape
        if n > self.arch.max_len:
            raise UsageError(f"sequence length {n} exceeds max_len {self.arch.max_len}")
        if ids.min() < 0 or ids.max() >= self.arch.vocab_size:
            raise UsageError("token id outside the vocabulary")
        p = self.params
        x = ad.add(ad.embedding(p["tok"], ids), ad.take(p["pos"], slice(0, n)))
        if first_feature is not None:
            lead = Tensor(np.asarray(first_feature, dtype=np.float64)[:, None, :])
            x = ad.concat([lead, ad.take(x, (slice(None), slice(1, None)))], axis=1)
        for i in range(self.arch.layers):
            x = nn.encoder_layer(p, f"enc{i}", x, valid, self.arch.heads)
        return nn.layer_norm(p, "lnf", x)

    def logits(self, hidden: Tensor) -> Tensor:
        return ad.matmul(hidden, ad.transpose(self.params["tok"]))

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None


def mlm_distribution(h: np.ndarray | Tensor, embeddings: np.ndarray | Tensor) -> np.ndarray:
    """``p(w | h) = softmax_w(e(w)^T h)`` over the full vocabulary."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    e = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)
    return ad.softmax(Tensor(h @ e.T), axis=-1).data


def generator_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """``-sum_{i in M} log p(w_i | h_i)``; ``mask`` flags the positions in M."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UsageError("generator_loss needs at least one masked position")
    return ad.cross_entropy(logits, np.asarray(targets), mask.astype(np.float64))


def categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row of a (k, V) probability matrix."""
    return inverse_cdf(probs, rng.random(probs.shape[0]))


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draws from given uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf <= (u * cdf[:, -1])[:, None]).sum(axis=-1), probs.shape[-1] - 1)


def sample_inconsistent(ids: Sequence[int], positions: Sequence[int], probs: np.ndarray,
                        rng: np.random.Generator | int,
                        special_ids=VOCAB.special_ids) -> tuple[list[int], list[int]]:
    """Fill masked slots by sampling and report where the sentence changed.

    Args:
        ids: original token ids ``w``.
        positions: the mask set ``M``.
        probs: ``(len(positions), V)`` sampling distributions, row-aligned with
            ``positions``.
        rng: generator or integer seed.

    Returns:
        ``(w_bar, T)`` with ``T = {t in M : w_bar[t] != w[t]}`` in ascending order.
    """
    positions = list(positions)
    if not positions:
        raise UsageError("mask set M is empty")
    if any(ids[i] in special_ids for i in positions):
        raise UsageError("mask set M contains a special-token position")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    draws = categorical_rows(np.asarray(probs, dtype=np.float64), rng)
    out = list(ids)
    for pos, tok in zip(positions, draws):
        out[pos] = int(tok)
    changed = sorted(p for p in positions if out[p] != ids[p])
    return out, changed


# ---------------------------------------------------------------- strategies

STRATEGIES = ("fine_tune", "fixed", "pre_trained", "image_conditioned", "vlm_sas", "random")


@dataclass(frozen=True)
class GeneratorStrategy:
    variant: str = "fine_tune"
    snapshot_every: int = 1  # epochs between VLM snapshots, vlm_sas only

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise UsageError(f"unknown generator strategy {self.variant!r}")
        if self.snapshot_every < 1:
            raise UsageError("snapshot_every must be >= 1")


@dataclass
class Proposal:
    """Sampling distributions for a batch plus the (possibly recorded) logits."""
    probs: np.ndarray          # (B, n, V)
    logits: Tensor | None      # recorded on the active tape; None for frozen drivers


class LMDriver:
    """Text-only generator: fine_tune, fixed and pre_trained strategies."""

    needs = "text"

    def __init__(self, lm: GeneratorLM, trainable: bool):
        self.lm = lm
        self.trainable = trainable
        if not trainable:
            lm.freeze()

    @property
    def params(self) -> nn.Params:
        return self.lm.params if self.trainable else {}

    def propose(self, masked_ids: np.ndarray, valid: np.ndarray) -> Proposal:
        logits = self.lm.logits(self.lm.hidden(masked_ids, valid))
        return Proposal(ad.softmax(ad.detach(logits)).data, logits if self.trainable else None)


class ImageConditionedDriver(LMDriver):
    """LM whose first input position carries the VLM's image [CLS] feature."""

    needs = "image_feature"

    def __init__(self, lm: GeneratorLM):
        super().__init__(lm, trainable=True)

    def propose(self, masked_ids: np.ndarray, valid: np.ndarray,  # type: ignore[override]
                image_feature: np.ndarray) -> Proposal:
        logits = self.lm.logits(self.lm.hidden(masked_ids, valid, first_feature=image_feature))
        return Proposal(ad.softmax(ad.detach(logits)).data, logits)


class SnapshotVLMDriver:
    """Frozen earlier copy of the VLM filling masks by cross-modal MLM inference."""

    needs = "regions"
    trainable = False
    params: nn.Params = {}

    def __init__(self, snapshots: Callable[[], tuple[int, object]]):
        self.snapshots = snapshots

    @property
    def snapshot_id(self) -> int:
        return self.snapshots()[0]

    def propose(self, masked_ids, valid, region_ids, region_valid) -> Proposal:
        _, vlm = self.snapshots()
        out = vlm.forward(masked_ids, valid, region_ids, region_valid)
        logits = vlm.cmlm_logits(out)
        return Proposal(ad.softmax(logits).data, None)


class RandomDriver:
    """Uniform replacement over all non-special words."""

    needs = "text"
    trainable = False
    params: nn.Params = {}

    def __init__(self, vocab: Vocabulary = VOCAB):
        self.row = np.array([0.0 if i in vocab.special_ids else 1.0 for i in range(len(vocab))])
        self.row /= self.row.sum()

    def propose(self, masked_ids: np.ndarray, valid: np.ndarray) -> Proposal:
        return Proposal(np.broadcast_to(self.row, masked_ids.shape + self.row.shape), None)


def make_generator(strategy: GeneratorStrategy, *, arch: LMArch = LMArch(), seed: int = 0,
                   lm: GeneratorLM | None = None,
                   corpus: Sequence[Sequence[int]] | None = None,
                   snapshots: Callable[[], tuple[int, object]] | None = None,
                   pretrain_steps: int = 1500):
    """Build the generator driver for a strategy.

    Assets: ``lm`` (a loaded checkpoint) is required by ``fixed``; ``pre_trained``
    takes either an ``lm`` already fit on the captions or a caption ``corpus`` to
    fit one on before the run; ``vlm_sas`` needs the trainer's ``snapshots``
    callback returning ``(snapshot_id, frozen_vlm)``.
    """
    v = strategy.variant
    if v == "fine_tune":
        return LMDriver(lm if lm is not None else GeneratorLM(arch, seed), trainable=True)
    if v == "fixed":
        if lm is None:
            raise ConfigurationError("strategy 'fixed' needs a language-model checkpoint")
        return LMDriver(lm, trainable=False)
    if v == "pre_trained":
        if lm is None:
            if corpus is None:
                raise ConfigurationError("strategy 'pre_trained' needs an LM checkpoint or a caption corpus")
            lm = GeneratorLM(arch, seed)
            fit_lm(lm, corpus, steps=pretrain_steps, seed=seed)
        return LMDriver(lm, trainable=False)
    if v == "image_conditioned":
        return ImageConditionedDriver(lm if lm is not None else GeneratorLM(arch, seed))
    if v == "vlm_sas":
        if snapshots is None:
            raise ConfigurationError("strategy 'vlm_sas' needs a VLM snapshot store")
        return SnapshotVLMDriver(snapshots)
    return RandomDriver()


# ---------------------------------------------------------------- text-only fitting


def mask_content_uniform(ids: np.ndarray, valid: np.ndarray, ratio: float,
                         rng: np.random.Generator, special_ids=VOCAB.special_ids) -> np.ndarray:
    """Boolean mask choosing ``ceil(ratio * len)`` content positions per row uniformly."""
    special = np.isin(ids, list(special_ids)) | ~valid
    mask = np.zeros(ids.shape, dtype=bool)
    for b in range(ids.shape[0]):
        cand = np.flatnonzero(~special[b])
        m = min(len(cand), int(np.ceil(round(ratio * len(cand), 9))))
        if m:
            mask[b, rng.choice(cand, size=m, replace=False)] = True
    return mask


def fit_lm(lm: GeneratorLM, corpus: Sequence[Sequence[int]], steps: int, seed: int,
           batch: int = 32, lr: float = 0.2, mask_ratio: float = 0.15,
           vocab: Vocabulary = VOCAB, log: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the LM by masked language modelling on captions alone."""
    from .optim import SGD, TriStageSchedule  # local import avoids a cycle

    rng = np.random.default_rng([seed, 202])
    opt = SGD(lm.params, TriStageSchedule(lr, steps))
    losses = []
    order = np.arange(len(corpus))
    cursor = len(order)
    for step in range(steps):
        if cursor + batch > len(order):
            rng.shuffle(order)
            cursor = 0
        seqs = [corpus[i] for i in order[cursor:cursor + batch]]
        cursor += batch
        ids, valid = nn.pad_batch(seqs, vocab.pad_id)
        mask = mask_content_uniform(ids, valid, mask_ratio, rng, vocab.special_ids)
        masked = np.where(mask, vocab.mask_id, ids)
        with Tape():
            logits = lm.logits(lm.hidden(masked, valid))
            loss = ad.mul(generator_loss(logits, ids, mask), 1.0 / mask.sum())
        opt.step(loss, step)
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return losses
