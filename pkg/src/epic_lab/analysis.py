"""Probes, ablations and oracle-based evaluation.

Everything here works through the public model interfaces (forward passes,
heads, checkpoints) so it applies unchanged to any compatible model.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score, roc_auc_score

from . import nn
from .autodiff import Tape, UsageError, _sigmoid_np
from . import autodiff as ad
from .generator import GeneratorLM, LMArch, categorical_rows, fit_lm, generator_loss, inverse_cdf
from .optim import SGD, TriStageSchedule
from .trainer import (CorruptionRecord, TrainConfig, TrainResult, mask_count, sample_mask_positions,
                      train)
from .vlm import VisionLanguageModel, VLMArch, batch_inputs, content_flags, extract_saliency
from .world import (FUNCTION, SALIENT_CLASSES, VOCAB, DatasetRecord, TokenSequence,
                    consistency_oracle, split_records)

EVAL_BATCH = 128


# ---------------------------------------------------------------- curves


@dataclass
class ProbeCurve:
    x: np.ndarray
    y: np.ndarray
    var: np.ndarray
    label: str
    seed_count: int = 1

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if not (len(self.x) == len(self.y) == len(self.var)):
            raise UsageError("curve arrays differ in length")
        if np.any(np.diff(self.x) <= 0):
            raise UsageError("curve x values must be strictly increasing")


def aggregate_curves(curves: Sequence[ProbeCurve], label: str | None = None) -> ProbeCurve:
    """Pointwise mean and (population) variance over per-seed curves."""
    if not curves:
        raise UsageError("nothing to aggregate")
    ys = np.stack([c.y for c in curves])
    xs = np.stack([c.x for c in curves])
    # x may differ slightly across seeds (e.g. measured corruption ratios); average it too
    x = xs.mean(axis=0)
    return ProbeCurve(x, ys.mean(axis=0), ys.var(axis=0), label or curves[0].label, len(curves))


def write_curves(curves: Sequence[ProbeCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "var", "label", "seed_count"])
        for c in curves:
            for x, y, v in zip(c.x, c.y, c.var):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v)), c.label, c.seed_count])


def read_curves(path) -> list[ProbeCurve]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["label"], []).append(row)
    return [ProbeCurve([float(r["x"]) for r in rs], [float(r["y"]) for r in rs],
                       [float(r["var"]) for r in rs], label, int(rs[0]["seed_count"]))
            for label, rs in rows.items()]


# ---------------------------------------------------------------- helpers


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _uniform_plans(records: Sequence[DatasetRecord], ratio: float, rng) -> list[list[int]]:
    plans = []
    for r in records:
        content = r.caption.content_positions()
        m = mask_count(len(content), ratio)
        plans.append(sorted(int(i) for i in rng.choice(content, size=m, replace=False)))
    return plans


def _mask_array(plans, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for b, pos in enumerate(plans):
        mask[b, pos] = True
    return mask


def predict_masked(model, seqs, scenes, mask: np.ndarray) -> np.ndarray:
    """Top-1 predictions (B, n) of a VLM (CMLM head) or LM (MLM head) on masked inputs."""
    ids, valid, rids, rvalid = batch_inputs(seqs, scenes)
    masked = np.where(mask, VOCAB.mask_id, ids)
    if isinstance(model, VisionLanguageModel):
        logits = model.cmlm_logits(model.forward(masked, valid, rids, rvalid)).data
    else:
        logits = model.logits(model.hidden(masked, valid)).data
    return logits.argmax(axis=-1)


def masked_accuracy(model, records: Sequence[DatasetRecord], plans, seqs=None) -> float:
    """Top-1 accuracy on the planned positions; ``seqs`` overrides the (unmasked) context."""
    seqs = [r.caption.ids for r in records] if seqs is None else seqs
    hit = total = 0
    for lo in range(0, len(records), EVAL_BATCH):
        chunk = slice(lo, lo + EVAL_BATCH)
        ids, _ = nn.pad_batch([r.caption.ids for r in records[chunk]], VOCAB.pad_id)
        mask = _mask_array(plans[chunk], ids.shape)
        pred = predict_masked(model, seqs[chunk], [r.scene for r in records[chunk]], mask)
        hit += int((pred[mask] == ids[mask]).sum())
        total += int(mask.sum())
    return hit / total


# ---------------------------------------------------------------- modality bias


@dataclass
class BiasProbeResult:
    vlm_curves: list[ProbeCurve]
    lm_curves: list[ProbeCurve]
    vlms: list[VisionLanguageModel]
    lms: list[GeneratorLM]

    @property
    def curves(self) -> tuple[ProbeCurve, ProbeCurve]:
        return (aggregate_curves(self.vlm_curves, "vlm_cmlm_acc"),
                aggregate_curves(self.lm_curves, "lm_mlm_acc"))


def probe_modality_bias_seed(records: Sequence[DatasetRecord], seed: int, steps: int = 1200,
                             batch: int = 32, lr: float = 0.1, mask_ratio: float = 0.15,
                             eval_every: int | None = None):
    """Train a VLM (CMLM) and an LM (MLM) on identical masked batches.

    Returns the two accuracy curves (x = epoch, or evaluation round when
    ``eval_every`` is given) and the trained models.
    """
    train_set, held = split_records(records)
    vlm = VisionLanguageModel(VLMArch(), seed=seed)
    lm = GeneratorLM(LMArch(), seed=seed)
    sched = TriStageSchedule(lr, steps)
    opt = SGD({**{f"v.{k}": v for k, v in vlm.params.items()},
               **{f"l.{k}": v for k, v in lm.params.items()}}, sched)
    eval_plans = _uniform_plans(held, mask_ratio, np.random.default_rng([seed, 606]))
    per_epoch = len(train_set) // batch
    eval_every = eval_every or per_epoch
    xs, vacc, lacc = [], [], []
    for step in range(steps):
        epoch, k = divmod(step, per_epoch)
        if k == 0:
            order = np.random.default_rng([seed, 505, epoch]).permutation(len(train_set))
        recs = [train_set[i] for i in order[k * batch:(k + 1) * batch]]
        rng = np.random.default_rng([seed, 607, step])
        ids, valid, rids, rvalid = batch_inputs([r.caption.ids for r in recs], [r.scene for r in recs])
        mask = _mask_array(_uniform_plans(recs, mask_ratio, rng), ids.shape)
        masked = np.where(mask, VOCAB.mask_id, ids)
        with Tape():
            v_logits = vlm.cmlm_logits(vlm.forward(masked, valid, rids, rvalid))
            l_logits = lm.logits(lm.hidden(masked, valid))
            scale = 1.0 / mask.sum()
            loss = ad.add(ad.mul(generator_loss(v_logits, ids, mask), scale),
                          ad.mul(generator_loss(l_logits, ids, mask), scale))
        opt.step(loss, step)
        if (step + 1) % eval_every == 0 or step == steps - 1:
            xs.append(len(xs))
            vacc.append(masked_accuracy(vlm, held, eval_plans))
            lacc.append(masked_accuracy(lm, held, eval_plans))
    zeros = np.zeros(len(xs))
    return (ProbeCurve(xs, vacc, zeros, "vlm_cmlm_acc"), ProbeCurve(xs, lacc, zeros, "lm_mlm_acc"),
            vlm, lm)


def probe_modality_bias(records, seeds=(0, 1, 2), **kw) -> BiasProbeResult:
    out = BiasProbeResult([], [], [], [])
    for s in seeds:
        vc, lc, vlm, lm = probe_modality_bias_seed(records, s, **kw)
        out.vlm_curves.append(vc)
        out.lm_curves.append(lc)
        out.vlms.append(vlm)
        out.lms.append(lm)
    return out


# ---------------------------------------------------------------- corrupted context


@dataclass
class CorruptionProbe:
    taus: list[float]
    ratio: list[float]        # mean unrecovered fraction per tau
    vlm_acc: list[float]
    lm_acc: list[float]

    def curves(self) -> tuple[ProbeCurve, ProbeCurve]:
        def drop(acc):
            return [(acc[0] - a) / acc[0] for a in acc]
        zeros = np.zeros(len(self.taus))
        return (ProbeCurve(self.ratio, drop(self.vlm_acc), zeros, "vlm_relative_drop"),
                ProbeCurve(self.ratio, drop(self.lm_acc), zeros, "lm_relative_drop"))


def probe_corruption_seed(vlm, lm, recovery: GeneratorLM, heldout: Sequence[DatasetRecord],
                          taus: Sequence[float], seed: int, mask_ratio: float = 0.15) -> CorruptionProbe:
    """Accuracy of the probed models when unmasked context is replaced by LM fills.

    Round 1 masks ``mask_ratio`` of the content tokens as prediction targets.
    Round 2 picks ``ceil(tau * remaining)`` of the other content tokens, masks
    them and fills them by sampling from ``recovery``. Round-2 sets are nested
    across taus (one random priority per token), so larger taus corrupt a
    superset of positions. Fills use one fixed uniform per token (common random
    numbers across taus), so a position corrupted at several taus changes only
    through its recovery context. Tau 0 is always evaluated first as the clean
    reference.
    """
    taus = [0.0] + [t for t in taus if t > 0]
    if any(not 0 <= t < 1 for t in taus) or np.any(np.diff(taus) <= 0):
        raise UsageError("taus must be increasing values in [0, 1)")
    rng = np.random.default_rng([seed, 707])
    plans = _uniform_plans(heldout, mask_ratio, rng)
    priority = [rng.random(len(r.caption)) for r in heldout]
    uniforms = [rng.random(len(r.caption)) for r in heldout]
    ratio, vacc, lacc = [], [], []
    for tau in taus:
        seqs, unrecovered = [], []
        for lo in range(0, len(heldout), EVAL_BATCH):
            chunk = heldout[lo:lo + EVAL_BATCH]
            ids, valid = nn.pad_batch([r.caption.ids for r in chunk], VOCAB.pad_id)
            r2 = np.zeros(ids.shape, dtype=bool)
            for b, r in enumerate(chunk):
                rest = [i for i in r.caption.content_positions() if i not in plans[lo + b]]
                k = min(len(rest), int(np.ceil(round(tau * len(rest), 9))))
                if k:
                    order = sorted(rest, key=lambda i: priority[lo + b][i])
                    r2[b, order[:k]] = True
            filled = ids.copy()
            if r2.any():
                masked = np.where(r2, VOCAB.mask_id, ids)
                probs = ad.softmax(recovery.logits(recovery.hidden(masked, valid))).data
                u = np.zeros(ids.shape)
                for b, r in enumerate(chunk):
                    u[b, :len(r.caption)] = uniforms[lo + b]
                filled[r2] = inverse_cdf(probs[r2], u[r2])
            for b, r in enumerate(chunk):
                n = len(r.caption)
                seqs.append(list(filled[b, :n]))
                unrecovered.append((filled[b, :n] != ids[b, :n]).sum() / len(r.caption.content_positions()))
        ratio.append(float(np.mean(unrecovered)))
        vacc.append(masked_accuracy(vlm, heldout, plans, seqs))
        lacc.append(masked_accuracy(lm, heldout, plans, seqs))
    return CorruptionProbe(taus, ratio, vacc, lacc)


def probe_corruption(vlms, lms, recoveries, heldout, taus=(0.1, 0.3, 0.5), seeds=(0, 1, 2)):
    """Per-seed probes plus the aggregated relative-drop curves."""
    probes = [probe_corruption_seed(v, l, r, heldout, taus, s)
              for v, l, r, s in zip(vlms, lms, recoveries, seeds)]
    v_curves = [p.curves()[0] for p in probes]
    l_curves = [p.curves()[1] for p in probes]
    return probes, (aggregate_curves(v_curves), aggregate_curves(l_curves))


def fit_text_lm(records: Sequence[DatasetRecord], seed: int, steps: int = 1500) -> GeneratorLM:
    """Caption-only LM used for fills (recovery, reference corruption, fixed generator)."""
    train_set, _ = split_records(records)
    lm = GeneratorLM(LMArch(), seed=seed)
    fit_lm(lm, [r.caption.ids for r in train_set], steps=steps, seed=seed)
    return lm


# ---------------------------------------------------------------- training statistics


def itc_statistics(metrics: Sequence[dict]) -> tuple[ProbeCurve, ProbeCurve]:
    """Per-epoch means of the inconsistent-token ratio and ITC accuracy on T."""
    by_epoch: dict[int, tuple[list, list]] = {}
    for rec in metrics:
        if rec.get("inconsistent_ratio") is None:
            continue
        ratios, accs = by_epoch.setdefault(int(rec["epoch"]), ([], []))
        ratios.append(rec["inconsistent_ratio"])
        if rec.get("itc_acc_on_inconsistent") is not None:
            accs.append(rec["itc_acc_on_inconsistent"])
    if not by_epoch:
        raise UsageError("metrics stream has no consistency-task records")
    epochs = sorted(by_epoch)
    ratio = [float(np.mean(by_epoch[e][0])) for e in epochs]
    var_r = [float(np.var(by_epoch[e][0])) for e in epochs]
    acc = [float(np.mean(by_epoch[e][1])) if by_epoch[e][1] else np.nan for e in epochs]
    var_a = [float(np.var(by_epoch[e][1])) if by_epoch[e][1] else np.nan for e in epochs]
    return (ProbeCurve(epochs, ratio, var_r, "inconsistent_ratio"),
            ProbeCurve(epochs, acc, var_a, "itc_acc_on_inconsistent"))


# ---------------------------------------------------------------- consistency detection


@dataclass
class CorruptedSet:
    """Held-out captions corrupted by uniform masking and LM filling, with oracle labels."""
    records: list[DatasetRecord]
    seqs: list[list[int]]
    labels: list[list[bool]]     # per token, True = inconsistent
    positions: list[list[int]]   # evaluated (content) positions
    abstained: int


def corrupt_heldout(heldout: Sequence[DatasetRecord], fill_lm: GeneratorLM, seed: int,
                    ratio: float = 0.35) -> CorruptedSet:
    rng = np.random.default_rng([seed, 808])
    plans = _uniform_plans(heldout, ratio, rng)
    out = CorruptedSet([], [], [], [], 0)
    for lo in range(0, len(heldout), EVAL_BATCH):
        chunk = heldout[lo:lo + EVAL_BATCH]
        ids, valid = nn.pad_batch([r.caption.ids for r in chunk], VOCAB.pad_id)
        mask = _mask_array(plans[lo:lo + EVAL_BATCH], ids.shape)
        probs = ad.softmax(fill_lm.logits(fill_lm.hidden(np.where(mask, VOCAB.mask_id, ids), valid))).data
        filled = ids.copy()
        filled[mask] = categorical_rows(probs[mask], rng)
        for b, r in enumerate(chunk):
            seq = [int(t) for t in filled[b, :len(r.caption)]]
            tokens = TokenSequence.from_ids(seq)
            labels = consistency_oracle(r.scene, tokens)
            if labels is None:
                out.abstained += 1
                continue
            out.records.append(r)
            out.seqs.append(seq)
            out.labels.append([not ok for ok in labels])
            out.positions.append(tokens.content_positions())
    return out


def _fused_text(model: VisionLanguageModel, seqs, scenes) -> list[np.ndarray]:
    feats = []
    for lo in range(0, len(seqs), EVAL_BATCH):
        ids, valid, rids, rvalid = batch_inputs(seqs[lo:lo + EVAL_BATCH], scenes[lo:lo + EVAL_BATCH])
        h = model.forward(ids, valid, rids, rvalid).text.data
        feats.extend(h[b, :len(s)] for b, s in enumerate(seqs[lo:lo + EVAL_BATCH]))
    return feats


def eval_consistency_detection(model: VisionLanguageModel, data: CorruptedSet, head: str = "probe",
                               seed: int = 0) -> dict:
    """AUC and F1 (threshold 0.5) for detecting oracle-inconsistent tokens.

    ``head="model"`` scores tokens with the model's own consistency head
    (inconsistency score ``1 - D``). ``head="probe"`` fits a logistic-regression
    probe on the frozen fused token states of one half of the sentences and
    scores the other half, which compares representations fairly across models
    that were or were not trained with a consistency head.
    """
    if head not in ("probe", "model"):
        raise UsageError("head must be 'probe' or 'model'")
    scenes = [r.scene for r in data.records]
    feats = _fused_text(model, data.seqs, scenes)
    X = [f[pos] for f, pos in zip(feats, data.positions)]
    Y = [np.array(lab)[pos] for lab, pos in zip(data.labels, data.positions)]
    if head == "model":
        beta = model.params["itc.beta"].data
        score = 1.0 - _sigmoid_np(np.concatenate(X) @ beta)
        y = np.concatenate(Y)
    else:
        idx = np.random.default_rng([seed, 909]).permutation(len(X))
        half = len(idx) // 2
        fit_i, test_i = idx[:half], idx[half:]
        Xf, yf = np.concatenate([X[i] for i in fit_i]), np.concatenate([Y[i] for i in fit_i])
        clf = LogisticRegression(max_iter=2000, C=1.0)
        clf.fit(Xf, yf)
        Xt, y = np.concatenate([X[i] for i in test_i]), np.concatenate([Y[i] for i in test_i])
        score = clf.predict_proba(Xt)[:, 1]
    return {"auc": float(roc_auc_score(y, score)), "f1": float(f1_score(y, score >= 0.5, zero_division=0)),
            "n_tokens": int(len(y)), "positive_rate": float(y.mean()), "abstained": data.abstained}


# ---------------------------------------------------------------- retrieval


def _match_scores(model: VisionLanguageModel, seqs, scenes) -> np.ndarray:
    out = []
    for lo in range(0, len(seqs), EVAL_BATCH):
        ids, valid, rids, rvalid = batch_inputs(seqs[lo:lo + EVAL_BATCH], scenes[lo:lo + EVAL_BATCH])
        logits = model.itm_logits(model.forward(ids, valid, rids, rvalid)).data
        out.append(logits[:, 1] - logits[:, 0])
    return np.concatenate(out)


def _is_match(scene, caption: TokenSequence) -> bool:
    labels = consistency_oracle(scene, caption)
    return labels is not None and all(labels)


def retrieval_pools(heldout: Sequence[DatasetRecord], pool: int = 32, seed: int = 0,
                    max_queries: int | None = None):
    """Negative index lists per query for both directions.

    Negatives are other held-out items that the oracle confirms do not match
    the query (so a caption true of several scenes never counts as a negative).
    """
    rng = np.random.default_rng([seed, 1001])
    n = len(heldout)
    if n < pool:
        raise UsageError(f"need at least {pool} held-out records for pool size {pool}")
    queries = range(n if max_queries is None else min(n, max_queries))
    t2i, i2t = [], []
    for q in queries:
        for direction, dest in (("t2i", t2i), ("i2t", i2t)):
            negs = []
            for j in rng.permutation(n):
                if j == q:
                    continue
                cap, scene = ((heldout[q].caption, heldout[j].scene) if direction == "t2i"
                              else (heldout[j].caption, heldout[q].scene))
                if not _is_match(scene, cap):
                    negs.append(int(j))
                if len(negs) == pool - 1:
                    break
            dest.append(negs)
    return list(queries), t2i, i2t


def eval_retrieval(model, heldout: Sequence[DatasetRecord], pool: int = 32, seed: int = 0,
                   max_queries: int | None = 200, scorer=None) -> dict:
    """Recall@1 in pools of one positive plus ``pool - 1`` oracle-checked negatives.

    ``scorer(seqs, scenes) -> scores`` defaults to the ITM match logit margin.
    """
    scorer = scorer or (lambda seqs, scenes: _match_scores(model, seqs, scenes))
    queries, t2i, i2t = retrieval_pools(heldout, pool, seed, max_queries)
    result = {}
    for name, negs_all in (("r1_t2i", t2i), ("r1_i2t", i2t)):
        seqs, scenes = [], []
        for q, negs in zip(queries, negs_all):
            for j in [q] + negs:
                if name == "r1_t2i":
                    seqs.append(heldout[q].caption.ids)
                    scenes.append(heldout[j].scene)
                else:
                    seqs.append(heldout[j].caption.ids)
                    scenes.append(heldout[q].scene)
        scores = np.asarray(scorer(seqs, scenes)).reshape(len(queries), pool)
        result[name] = float(np.mean(scores[:, 0] > scores[:, 1:].max(axis=1)))
    result["r1_mean"] = (result["r1_t2i"] + result["r1_i2t"]) / 2
    return result


# ---------------------------------------------------------------- saliency


def saliency_table(model: VisionLanguageModel, records: Sequence[DatasetRecord]) -> list[tuple]:
    """Rows ``(record_seed, position, word, alpha, ground_truth_salient)`` over content tokens."""
    rows = []
    for lo in range(0, len(records), EVAL_BATCH):
        chunk = records[lo:lo + EVAL_BATCH]
        ids, valid, rids, rvalid = batch_inputs([r.caption.ids for r in chunk], [r.scene for r in chunk])
        alpha = extract_saliency(model, ids, valid, rids, rvalid)
        for b, r in enumerate(chunk):
            for i in r.caption.content_positions():
                rows.append((r.record_seed, i, r.caption.words[i], float(alpha[b, i]), bool(r.caption.salient[i])))
    return rows


def saliency_contrast(model: VisionLanguageModel, records: Sequence[DatasetRecord]) -> dict:
    """Mean alpha on salient words versus function words."""
    rows = saliency_table(model, records)
    sal = [a for _, _, _, a, s in rows if s]
    fun = [a for _, _, w, a, s in rows if not s]
    return {"salient_mean": float(np.mean(sal)), "function_mean": float(np.mean(fun)),
            "ratio": float(np.mean(sal) / np.mean(fun))}


def saliency_hit_rate(teacher, records: Sequence[DatasetRecord], ratio: float, seed: int,
                      use_saliency: bool = True) -> float:
    """Fraction of masked positions that are ground-truth salient."""
    rng = np.random.default_rng([seed, 1111])
    hit = total = 0
    for lo in range(0, len(records), EVAL_BATCH):
        chunk = records[lo:lo + EVAL_BATCH]
        ids, valid, rids, rvalid = batch_inputs([r.caption.ids for r in chunk], [r.scene for r in chunk])
        content = content_flags(ids, valid)
        if use_saliency:
            alpha = extract_saliency(teacher, ids, valid, rids, rvalid)
        else:
            alpha = content / content.sum(axis=1, keepdims=True)
        for b, r in enumerate(chunk):
            pos = sample_mask_positions(alpha[b], mask_count(int(content[b].sum()), ratio), rng)
            hit += sum(r.caption.salient[i] for i in pos)
            total += len(pos)
    return hit / total


# ---------------------------------------------------------------- ablations


def run_dagger_cmlm(cfg: TrainConfig, records, teacher, **kw) -> TrainResult:
    """Baseline ITM + CMLM training with saliency-sampled CMLM masks."""
    cfg = replace(cfg, objectives=("itm", "mlm"), cmlm_masking="saliency")
    return train(cfg, records, teacher=teacher, **kw)


def mask_ratio_sweep(cfg: TrainConfig, records, teacher, ratios=(0.15, 0.25, 0.35, 0.45),
                     fill_lm: GeneratorLM | None = None, eval_seed: int = 0,
                     retrieval_queries: int = 200, **kw) -> list[dict]:
    """One EPIC run per mask ratio, each evaluated on detection and retrieval."""
    if any(not 0 < r < 1 for r in ratios):
        raise UsageError("ratios must lie in (0, 1)")
    _, held = split_records(records)
    fill_lm = fill_lm or fit_text_lm(records, eval_seed)
    data = corrupt_heldout(held, fill_lm, eval_seed)
    rows = []
    for ratio in ratios:
        t0 = time.perf_counter()
        res = train(replace(cfg, mask_ratio=ratio), records, teacher=teacher, **kw)
        det = eval_consistency_detection(res.model, data, seed=eval_seed)
        ret = eval_retrieval(res.model, held, seed=eval_seed, max_queries=retrieval_queries)
        rows.append({"mask_ratio": ratio, "auc": det["auc"], "f1": det["f1"],
                     "r1_t2i": ret["r1_t2i"], "r1_i2t": ret["r1_i2t"],
                     "seconds": time.perf_counter() - t0})
    return rows
