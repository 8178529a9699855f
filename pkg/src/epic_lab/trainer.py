"""Training loop: saliency masking, inconsistent-token generation and the joint objective.

One optimisation step (with every objective enabled) does the following:

1. the frozen teacher scores token saliency for the clean captions;
2. ``m = ceil(ratio * #content)`` positions are drawn without replacement from
   that saliency and replaced by [MASK];
3. the generator samples fillers, giving the corrupted caption and the set of
   changed (inconsistent) positions;
4. one stacked VLM forward covers the ITM pairs, the CMLM inputs and the
   corrupted captions, and the weighted sum of the losses is minimised.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import NumericError, Tape, Tensor, UsageError
from .checkpoint import load_checkpoint, save_checkpoint
from .generator import (STRATEGIES, ConfigurationError, GeneratorLM, GeneratorStrategy, LMArch,
                        Proposal, categorical_rows, generator_loss, make_generator)
from .optim import SGD, TriStageSchedule
from .vlm import (VisionLanguageModel, VLMArch, batch_inputs, content_flags, derangement,
                  extract_saliency, records_inputs)
from .world import VOCAB, DatasetRecord, split_records

log = logging.getLogger(__name__)

OBJECTIVES = ("itm", "mlm", "itc", "gen")
METRIC_KEYS = ("step", "epoch", "l_itm", "l_mlm", "l_itc", "l_gen", "l_total", "lr",
               "inconsistent_ratio", "itc_acc_on_inconsistent", "seed", "snapshot_id")


class TrainingDiverged(NumericError):
    """A loss became non-finite; ``record`` is the diagnostic metrics line."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    mask_ratio: float = 0.35
    lambda_itc: float = 8.0
    lr: float = 0.1
    warmup_frac: float = 0.10
    hold_frac: float = 0.80
    final_scale: float = 0.01
    steps: int = 1000
    batch: int = 16
    seed: int = 0
    generator: str = "fine_tune"
    teacher: str | None = None
    generator_checkpoint: str | None = None
    objectives: tuple[str, ...] = OBJECTIVES
    # "saliency" falls back to uniform when no teacher is configured
    itc_masking: str = "saliency"
    cmlm_ratio: float = 0.15
    cmlm_masking: str = "uniform"
    snapshot_every: int = 1
    refresh_teacher_every: int = 0
    lm_pretrain_steps: int = 1500
    clip: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0 or not 0.0 < self.cmlm_ratio < 1.0:
            raise UsageError("mask ratios must lie in (0, 1)")
        if self.lambda_itc < 0:
            raise UsageError("lambda_itc must be >= 0")
        if not self.objectives or not set(self.objectives) <= set(OBJECTIVES):
            raise UsageError(f"objectives must be a nonempty subset of {OBJECTIVES}")
        if self.generator not in STRATEGIES:
            raise UsageError(f"unknown generator strategy {self.generator!r}")
        if self.itc_masking not in ("saliency", "uniform") or self.cmlm_masking not in ("saliency", "uniform"):
            raise UsageError("masking must be 'saliency' or 'uniform'")
        if self.steps < 1 or self.batch < 2:
            raise UsageError("need steps >= 1 and batch >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objectives"] = list(self.objectives)
        return d

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, e.g. a parsed key=value file."""
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise UsageError(f"unknown config key {key!r}")
            out[key] = _coerce(kinds[key], raw)
        return cls(**out)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return tuple(raw) if f.name == "objectives" else raw
    raw = raw.strip()
    if f.name == "objectives":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    default = f.default
    if default is None or isinstance(default, str):
        return None if raw.lower() in ("", "none") else raw
    try:
        return type(default)(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {f.name}: {raw!r}") from exc


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------- masking


def mask_count(n_content: int, ratio: float) -> int:
    """``m = ceil(ratio * n)`` clamped to ``n``."""
    if n_content < 1:
        raise UsageError("sentence has no content tokens")
    # round first so that e.g. 0.28 * 25 = 7.000000000000001 does not ceil to 8
    return min(n_content, math.ceil(round(ratio * n_content, 9)))


def sample_mask_positions(alpha, m: int, rng) -> list[int]:
    """Draw ``m`` distinct positions from ``alpha`` without replacement.

    Each draw is categorical over the remaining weights, renormalised.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    w = np.array(alpha, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise UsageError("saliency weights must be finite and nonnegative")
    if m > int(np.count_nonzero(w)):
        raise UsageError(f"cannot draw {m} positions from {np.count_nonzero(w)} with nonzero weight")
    chosen = []
    for _ in range(m):
        cdf = np.cumsum(w)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        chosen.append(i)
        w[i] = 0.0
    return chosen


def apply_mask(ids: Sequence[int], positions, mask_id: int = VOCAB.mask_id) -> list[int]:
    out = list(ids)
    for i in positions:
        out[i] = mask_id
    return out


@dataclass(frozen=True)
class CorruptionRecord:
    original: tuple[int, ...]
    positions: tuple[int, ...]
    m: int
    corrupted: tuple[int, ...]
    inconsistent: tuple[int, ...]
    alpha: tuple[float, ...]

    def __post_init__(self):
        M = set(self.positions)
        if len(self.positions) != self.m or len(M) != self.m:
            raise UsageError("mask plan must hold m distinct positions")
        if not set(self.inconsistent) <= M:
            raise UsageError("inconsistent positions must lie inside the mask plan")
        diff = {i for i, (a, b) in enumerate(zip(self.original, self.corrupted)) if a != b}
        if diff != set(self.inconsistent) or len(self.original) != len(self.corrupted):
            raise UsageError("corrupted caption must differ from the original exactly on T")


def _alpha_rows(teacher, ids, valid, rids, rvalid, use_saliency: bool) -> np.ndarray:
    content = content_flags(ids, valid)
    if use_saliency and teacher is not None:
        return extract_saliency(teacher, ids, valid, rids, rvalid)
    counts = content.sum(axis=1, keepdims=True)
    return np.where(content, 1.0 / np.maximum(counts, 1), 0.0)


def _mask_rows(alpha: np.ndarray, valid: np.ndarray, ids: np.ndarray, ratio: float,
               rng: np.random.Generator) -> list[list[int]]:
    content = content_flags(ids, valid)
    return [sample_mask_positions(alpha[b], mask_count(int(content[b].sum()), ratio), rng)
            for b in range(len(ids))]


def _plan_to_mask(plans, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for b, pos in enumerate(plans):
        mask[b, pos] = True
    return mask


# ---------------------------------------------------------------- corruption


@dataclass
class Corruption:
    """Output of the masking + generation half of a step."""
    ids: np.ndarray           # (B, n) original
    valid: np.ndarray
    region_ids: np.ndarray
    region_valid: np.ndarray
    corrupted: np.ndarray     # (B, n) w_bar
    mask: np.ndarray          # (B, n) bool, M
    inconsistent: np.ndarray  # (B, n) bool, T
    alpha: np.ndarray
    records: list[CorruptionRecord]
    l_gen: Tensor | None      # mean over masked positions; None for non-LM generators


def corrupt(records: Sequence[DatasetRecord], vlm: VisionLanguageModel, teacher, driver,
            cfg: TrainConfig, rng: np.random.Generator, inputs=None) -> Corruption:
    """Saliency masking and generator filling for one batch.

    Must run inside the step's tape when the generator is trainable so that the
    returned ``l_gen`` carries gradient.
    """
    ids, valid, rids, rvalid = inputs if inputs is not None else records_inputs(records)
    use_saliency = cfg.itc_masking == "saliency"
    if use_saliency and teacher is None:
        log.debug("no teacher configured: masking uniformly over content tokens")
    alpha = _alpha_rows(teacher, ids, valid, rids, rvalid, use_saliency)
    plans = _mask_rows(alpha, valid, ids, cfg.mask_ratio, rng)
    mask = _plan_to_mask(plans, ids.shape)
    masked = np.where(mask, VOCAB.mask_id, ids)

    if driver.needs == "image_feature":
        feature = vlm.encode_image(rids, rvalid).data[:, 0]
        proposal: Proposal = driver.propose(masked, valid, feature)
    elif driver.needs == "regions":
        proposal = driver.propose(masked, valid, rids, rvalid)
    else:
        proposal = driver.propose(masked, valid)

    rows = np.argwhere(mask)
    draws = categorical_rows(np.asarray(proposal.probs)[mask], rng)
    corrupted = ids.copy()
    corrupted[rows[:, 0], rows[:, 1]] = draws
    inconsistent = corrupted != ids
    l_gen = None
    if proposal.logits is not None:
        l_gen = ad.mul(generator_loss(proposal.logits, ids, mask), 1.0 / mask.sum())

    recs = []
    for b, pos in enumerate(plans):
        n = int(valid[b].sum())
        recs.append(CorruptionRecord(tuple(int(x) for x in ids[b, :n]), tuple(pos), len(pos),
                                     tuple(int(x) for x in corrupted[b, :n]),
                                     tuple(int(i) for i in np.flatnonzero(inconsistent[b])),
                                     tuple(float(a) for a in alpha[b, :n])))
    return Corruption(ids, valid, rids, rvalid, corrupted, mask, inconsistent, alpha, recs, l_gen)


def itc_batch_loss(vlm: VisionLanguageModel, out, corruption: Corruption):
    """Mean consistency BCE over content positions of the corrupted captions.

    Returns ``(loss, probs)`` where ``probs`` are the detached D values.
    """
    logits = vlm.itc_logits(out)
    weights = content_flags(corruption.corrupted, corruption.valid).astype(np.float64)
    targets = (~corruption.inconsistent).astype(np.float64)
    loss = ad.mul(ad.bce_with_logits(logits, targets, weights), 1.0 / weights.sum())
    return loss, ad._sigmoid_np(logits.data)


def epic_step(records: Sequence[DatasetRecord], vlm: VisionLanguageModel, teacher, driver,
              cfg: TrainConfig, seed) -> tuple[Tensor, Tensor | None, list[CorruptionRecord]]:
    """Masking, generation and the consistency loss for one batch.

    Returns ``(l_itc, l_gen, corruption_records)`` recorded on a fresh tape (the
    tape is reachable from the losses for a subsequent ``backward``).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with Tape():
        c = corrupt(records, vlm, teacher, driver, cfg, rng)
        out = vlm.forward(c.corrupted, c.valid, c.region_ids, c.region_valid)
        l_itc, _ = itc_batch_loss(vlm, out, c)
    return l_itc, c.l_gen, c.records


def total_loss(l_itm, l_mlm, l_itc, l_gen, lam: float, objectives: Sequence[str] = OBJECTIVES):
    """``L_ITM + L_MLM + lam * L_ITC + L_GEN`` with absent objectives dropped.

    Works on floats or tensors; ``None`` components count as absent.
    """
    terms = []
    for name, value, weight in (("itm", l_itm, 1.0), ("mlm", l_mlm, 1.0),
                                ("itc", l_itc, lam), ("gen", l_gen, 1.0)):
        if name not in objectives or value is None:
            continue
        terms.append(value if weight == 1.0 else (ad.mul(value, weight) if isinstance(value, Tensor)
                                                  else weight * value))
    if not terms:
        return 0.0
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t) if isinstance(acc, Tensor) or isinstance(t, Tensor) else acc + t
    return acc


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: VisionLanguageModel
    generator: object
    metrics: list[dict] = field(default_factory=list)


def build_driver(cfg: TrainConfig, corpus, snapshots, lm: GeneratorLM | None = None):
    if lm is None and cfg.generator_checkpoint:
        lm = load_checkpoint(cfg.generator_checkpoint, expect="lm")
    return make_generator(GeneratorStrategy(cfg.generator, cfg.snapshot_every), arch=LMArch(),
                          seed=cfg.seed, lm=lm, corpus=corpus, snapshots=snapshots,
                          pretrain_steps=cfg.lm_pretrain_steps)


def train(cfg: TrainConfig, records: Sequence[DatasetRecord], *, teacher=None,
          generator_lm: GeneratorLM | None = None, model: VisionLanguageModel | None = None,
          sink: Callable[[dict], None] | None = None, checkpoint_dir=None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps on the non-held-out records.

    Args:
        cfg: run configuration.
        records: dataset; held-out records are skipped.
        teacher: frozen saliency model; when None, ``cfg.teacher`` is loaded if set.
        generator_lm: LM overriding ``cfg.generator_checkpoint``.
        model: initial VLM (default: fresh, seeded by ``cfg.seed``).
        sink: called with each metrics record as it is produced.
        checkpoint_dir: if set, the VLM is saved there at every epoch end.
    """
    train_set, _ = split_records(records)
    if not train_set:
        raise UsageError("dataset has no training records")
    if len(train_set) < cfg.batch:
        raise UsageError(f"batch {cfg.batch} exceeds the {len(train_set)} training records")
    objectives = set(cfg.objectives)
    needs_corruption = bool(objectives & {"itc", "gen"})
    needs_teacher = (needs_corruption and cfg.itc_masking == "saliency") or (
        "mlm" in objectives and cfg.cmlm_masking == "saliency")
    if teacher is None and cfg.teacher and needs_teacher:
        teacher = load_checkpoint(cfg.teacher, expect="vlm")
    if teacher is not None:
        teacher.freeze()
    if cfg.cmlm_masking == "saliency" and "mlm" in objectives and teacher is None:
        raise ConfigurationError("saliency-masked CMLM needs a teacher")

    vlm = model if model is not None else VisionLanguageModel(VLMArch(), seed=cfg.seed)
    snap = {"id": 0, "model": None}
    if cfg.generator == "vlm_sas":
        snap["model"] = vlm.copy()
        snap["model"].freeze()
    driver = None
    if needs_corruption:
        corpus = [r.caption.ids for r in train_set]
        driver = build_driver(cfg, corpus, lambda: (snap["id"], snap["model"]), generator_lm)

    params = {f"vlm.{k}": v for k, v in vlm.params.items()}
    if driver is not None and driver.trainable and "gen" in objectives:
        params.update({f"gen.{k}": v for k, v in driver.params.items()})
    opt = SGD(params, TriStageSchedule(cfg.lr, cfg.steps, cfg.warmup_frac, cfg.hold_frac,
                                       cfg.final_scale), clip=cfg.clip)

    B = cfg.batch
    per_epoch = len(train_set) // B
    metrics: list[dict] = []
    order = np.arange(len(train_set))
    for step in range(cfg.steps):
        epoch, k = divmod(step, per_epoch)
        if k == 0:
            order = np.random.default_rng([cfg.seed, 505, epoch]).permutation(len(train_set))
        batch = [train_set[i] for i in order[k * B:(k + 1) * B]]
        rng = np.random.default_rng([cfg.seed, 404, step])
        rec = _train_step(vlm, teacher, driver, cfg, objectives, batch, rng, opt, step, epoch,
                          snap["id"] if cfg.generator == "vlm_sas" else None, sink)
        metrics.append(rec)
        if sink is not None:
            sink(rec)
        if k == per_epoch - 1 or step == cfg.steps - 1:
            if checkpoint_dir is not None:
                save_checkpoint(vlm, Path(checkpoint_dir) / f"vlm-epoch{epoch:03d}.ckpt")
            if cfg.generator == "vlm_sas" and (epoch + 1) % cfg.snapshot_every == 0:
                snap["id"] = epoch + 1
                snap["model"] = vlm.copy()
                snap["model"].freeze()
            if cfg.refresh_teacher_every and teacher is not None and (epoch + 1) % cfg.refresh_teacher_every == 0:
                teacher = vlm.copy()
                teacher.freeze()
    return TrainResult(vlm, driver, metrics)


def _train_step(vlm, teacher, driver, cfg, objectives, batch, rng, opt, step, epoch,
                snapshot_id, sink) -> dict:
    B = len(batch)
    inputs = records_inputs(batch)
    ids, valid, rids, rvalid = inputs
    seqs = [r.caption.ids for r in batch]
    scenes = [r.scene for r in batch]

    mlm_mask = None
    if "mlm" in objectives:
        alpha = _alpha_rows(teacher, ids, valid, rids, rvalid, cfg.cmlm_masking == "saliency")
        mlm_mask = _plan_to_mask(_mask_rows(alpha, valid, ids, cfg.cmlm_ratio, rng), ids.shape)

    with Tape():
        corruption = None
        if driver is not None:
            corruption = corrupt(batch, vlm, teacher, driver, cfg, rng, inputs)

        # stacked VLM inputs: [itm positives, itm negatives, cmlm, itc]
        stream_ids, stream_scenes, spans = [], [], {}
        if "itm" in objectives:
            perm = derangement(B, rng)
            stream_ids += seqs + [seqs[j] for j in perm]
            stream_scenes += scenes + scenes
            spans["itm"] = slice(0, 2 * B)
        if mlm_mask is not None:
            start = len(stream_ids)
            stream_ids += [list(row[:len(s)]) for row, s in zip(np.where(mlm_mask, VOCAB.mask_id, ids), seqs)]
            stream_scenes += scenes
            spans["mlm"] = slice(start, start + B)
        if corruption is not None and "itc" in objectives:
            start = len(stream_ids)
            stream_ids += [list(row[:len(s)]) for row, s in zip(corruption.corrupted, seqs)]
            stream_scenes += scenes
            spans["itc"] = slice(start, start + B)

        l_itm = l_mlm = l_itc = None
        itc_probs = None
        if stream_ids:
            s_ids, s_valid, s_rids, s_rvalid = batch_inputs(stream_ids, stream_scenes)
            out = vlm.forward(s_ids, s_valid, s_rids, s_rvalid)
            n = ids.shape[1]
            if "itm" in spans:
                logits = ad.take(vlm.itm_logits(out), spans["itm"])
                labels = np.array([1] * B + [0] * B)
                l_itm = ad.mul(ad.cross_entropy(logits, labels), 1.0 / (2 * B))
            if "mlm" in spans or "itc" in spans:
                text = out.text
            if "mlm" in spans:
                h = ad.take(text, (spans["mlm"], slice(0, n)))
                logits = vlm.cmlm_logits(_with_text(out, h))
                l_mlm = ad.mul(ad.cross_entropy(logits, ids, mlm_mask.astype(np.float64)),
                               1.0 / mlm_mask.sum())
            if "itc" in spans:
                h = ad.take(text, (spans["itc"], slice(0, n)))
                l_itc, itc_probs = itc_batch_loss(vlm, _with_text(out, h), corruption)
        l_gen = corruption.l_gen if corruption is not None and "gen" in objectives else None
        total = total_loss(l_itm, l_mlm, l_itc, l_gen, cfg.lambda_itc, objectives)

    rec = {
        "step": step, "epoch": epoch,
        "l_itm": _val(l_itm), "l_mlm": _val(l_mlm), "l_itc": _val(l_itc), "l_gen": _val(l_gen),
        "l_total": _val(total), "lr": None,
        "inconsistent_ratio": None, "itc_acc_on_inconsistent": None,
        "seed": cfg.seed, "snapshot_id": snapshot_id,
    }
    if corruption is not None:
        rec["inconsistent_ratio"] = float(corruption.inconsistent.sum() / corruption.mask.sum())
        if itc_probs is not None and corruption.inconsistent.any():
            rec["itc_acc_on_inconsistent"] = float((itc_probs[corruption.inconsistent] < 0.5).mean())
    if not isinstance(total, Tensor):
        raise UsageError("no trainable objective in this configuration")
    try:
        rec["lr"] = opt.step(total, step)
    except NumericError as exc:
        bad = dict(rec, error=str(exc))
        if sink is not None:
            sink(bad)
        raise TrainingDiverged(f"training diverged at step {step}: {exc}", bad) from exc
    return rec


def _with_text(out, text):
    return dataclasses.replace(out, text=text)


def _val(t) -> float:
    if t is None:
        return 0.0
    return float(t.item() if isinstance(t, Tensor) else t)


def write_metrics(metrics: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
