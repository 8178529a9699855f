import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from epic_lab import autodiff as ad
from epic_lab.autodiff import UsageError
from epic_lab.generator import GeneratorStrategy, RandomDriver, make_generator, sample_inconsistent
from epic_lab.optim import TriStageSchedule
from epic_lab.trainer import (METRIC_KEYS, CorruptionRecord, TrainConfig, TrainingDiverged, apply_mask,
                              epic_step, mask_count, read_config, read_metrics, sample_mask_positions,
                              total_loss, train, write_metrics)
from epic_lab.vlm import VisionLanguageModel, VLMArch, content_flags, records_inputs
from epic_lab.world import VOCAB, DatasetRecord, Scene, TokenSequence, generate_dataset

SMALL = VLMArch(width=8, heads=2, text_layers=1, vision_layers=1, ffn=8)


def micro_batch():
    scenes = [Scene(((0, 0, 0, 0, 0),), (3, 3)), Scene(((1, 1, 1, 2, 2),), (3, 3))]
    caps = [["[CLS]", "a", "red", "circle"], ["[CLS]", "the", "blue", "square"]]
    return [DatasetRecord(s, TokenSequence.from_words(c), i + 1) for i, (s, c) in enumerate(zip(scenes, caps))]


def test_mask_count_examples():
    assert mask_count(20, 0.15) == 3
    assert mask_count(6, 0.35) == 3
    assert mask_count(1, 0.35) == 1
    assert mask_count(4, 0.99) == 4
    with pytest.raises(UsageError):
        mask_count(0, 0.35)


def test_pick_rates_match_alpha():
    rng = np.random.default_rng(0)
    n = 100_000
    picks = np.array([sample_mask_positions([0.7, 0.2, 0.1], 1, rng)[0] for _ in range(n)])
    freq = np.bincount(picks, minlength=3) / n
    p = np.array([0.7, 0.2, 0.1])
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n))


def test_uniform_inclusion_rate_half():
    rng = np.random.default_rng(1)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[sample_mask_positions([0.25] * 4, 2, rng)] += 1
    assert np.all(np.abs(counts / n - 0.5) < 3 * math.sqrt(0.25 / n))


def test_one_hot_alpha_always_picks_it():
    assert all(sample_mask_positions([0, 0, 1, 0], 1, s) == [2] for s in range(50))


def test_too_many_positions_rejected():
    with pytest.raises(UsageError):
        sample_mask_positions([0.5, 0.5, 0.0], 3, 0)


def test_mask_positions_fuzz():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        n = int(rng.integers(1, 20))
        alpha = rng.dirichlet(np.ones(n)) * (rng.random(n) > 0.2)
        live = int(np.count_nonzero(alpha))
        if live == 0:
            continue
        m = int(rng.integers(1, live + 1))
        M = sample_mask_positions(alpha, m, rng)
        assert len(M) == m and len(set(M)) == m and all(alpha[i] > 0 for i in M)


def test_apply_mask():
    mid = VOCAB.mask_id
    assert apply_mask([5, 6, 7], [2]) == [5, 6, mid]
    assert apply_mask([5, 6, 7], []) == [5, 6, 7]
    assert apply_mask(apply_mask([5, 6, 7], [0]), [0]) == apply_mask([5, 6, 7], [0])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_corruption_algebra(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    ids = [VOCAB.cls_id] + list(rng.integers(4, len(VOCAB), n - 1))
    m = mask_count(n - 1, 0.35)
    M = [i + 1 for i in sample_mask_positions(np.ones(n - 1), m, rng)]
    probs = rng.dirichlet(np.ones(len(VOCAB)) * 0.3, size=m)
    w_bar, T = sample_inconsistent(ids, M, probs, rng)
    assert set(T) <= set(M)
    assert all(w_bar[i] == ids[i] for i in range(n) if i not in T)
    assert T == sorted(t for t in M if w_bar[t] != ids[t])


def test_uniform_vocab_change_rate():
    V = 20
    probs = np.full((1, V), 1 / V)
    rng = np.random.default_rng(3)
    n = 100_000
    hits = sum(bool(sample_inconsistent([VOCAB.cls_id, 5], [1], probs, rng)[1]) for _ in range(n))
    p = 1 - 1 / V
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_corruption_record_validates():
    CorruptionRecord((1, 5, 6), (1,), 1, (1, 7, 6), (1,), (0.0, 0.5, 0.5))
    with pytest.raises(UsageError):
        CorruptionRecord((1, 5, 6), (1,), 1, (1, 5, 7), (2,), (0.0, 0.5, 0.5))
    with pytest.raises(UsageError):
        CorruptionRecord((1, 5, 6), (1, 1), 2, (1, 5, 6), (), (0.0, 0.5, 0.5))


def test_total_loss_examples():
    assert total_loss(1, 1, 0.5, 1, 8) == 7.0
    assert total_loss(0, 0, 0, 0, 8) == 0
    assert total_loss(1.25, 0.5, 3.0, 0.75, 0.0) == total_loss(1.25, 0.5, None, 0.75, 8)
    assert total_loss(1, 1, 0.5, 1, 8, objectives=("itm", "mlm")) == 2.0


def test_total_loss_gradient():
    lam = 8.0
    for point in np.random.default_rng(4).uniform(0.1, 2.0, size=(10, 4)):
        def f(x):
            parts = [ad.take(x, i) for i in range(4)]
            return total_loss(*parts, lam)
        assert ad.grad_check(f, point) < 1e-4


class _Identity:
    needs = "text"
    trainable = False
    params = {}

    def propose(self, masked_ids, valid):
        probs = np.zeros(masked_ids.shape + (len(VOCAB),))
        ids = self.ids
        probs[np.arange(ids.shape[0])[:, None], np.arange(ids.shape[1]), ids] = 1.0
        from epic_lab.generator import Proposal
        return Proposal(probs, None)


def test_epic_step_with_empty_T_is_all_positive_bce():
    batch = micro_batch()
    vlm = VisionLanguageModel(SMALL, seed=0)
    driver = _Identity()
    driver.ids = records_inputs(batch)[0]
    cfg = TrainConfig(batch=2)
    l_itc, l_gen, recs = epic_step(batch, vlm, None, driver, cfg, 0)
    assert l_gen is None and all(r.inconsistent == () for r in recs)
    ids, valid, rids, rvalid = records_inputs(batch)
    out = vlm.forward(ids, valid, rids, rvalid)
    z = vlm.itc_logits(out).data
    w = content_flags(ids, valid)
    expected = -np.log(1 / (1 + np.exp(-z[w]))).sum() / w.sum()
    assert l_itc.item() == pytest.approx(expected, rel=1e-12)


def test_epic_step_reproduces_bitwise():
    batch = micro_batch()
    cfg = TrainConfig(batch=2)
    runs = []
    for _ in range(2):
        vlm = VisionLanguageModel(SMALL, seed=0)
        driver = make_generator(GeneratorStrategy("fine_tune"), seed=0)
        l_itc, l_gen, recs = epic_step(batch, vlm, None, driver, cfg, 11)
        runs.append((l_itc.item(), l_gen.item(), recs))
    assert runs[0] == runs[1]


def test_uniform_masking_chi_square():
    rng = np.random.default_rng(5)
    n = 100_000
    counts = np.zeros(6)
    for _ in range(n):
        counts[sample_mask_positions(np.ones(6), 1, rng)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_lambda_zero_is_baseline_objective_bitwise():
    batch = micro_batch()
    vlm = VisionLanguageModel(SMALL, seed=0)
    driver = make_generator(GeneratorStrategy("fine_tune"), seed=0)
    l_itc, l_gen, _ = epic_step(batch, vlm, None, driver, TrainConfig(batch=2), 3)
    l_itm, l_mlm = 0.6931471805599453, 3.4
    a = total_loss(l_itm, l_mlm, l_itc.item(), l_gen.item(), 0.0)
    b = total_loss(l_itm, l_mlm, None, l_gen.item(), 8.0)
    assert a == b


def test_schedule_half_peak_at_five_percent():
    sched = TriStageSchedule(0.1, 1000)
    assert sched(50) == pytest.approx(0.05, abs=1e-15)
    assert sched(0) == 0.0 and sched(500) == 0.1
    assert sched(1000) == pytest.approx(0.001)


def _tiny(**kw):
    base = dict(steps=4, batch=4, seed=1, lm_pretrain_steps=5)
    base.update(kw)
    return TrainConfig(**base)


RECORDS = generate_dataset(60, 0)


def test_train_is_deterministic_and_emits_all_keys():
    a = train(_tiny(), RECORDS, model=VisionLanguageModel(SMALL, seed=1)).metrics
    b = train(_tiny(), RECORDS, model=VisionLanguageModel(SMALL, seed=1)).metrics
    assert a == b
    assert all(set(METRIC_KEYS) <= set(r) for r in a)
    assert [r["step"] for r in a] == [0, 1, 2, 3]


def test_teacher_is_unchanged_by_training():
    teacher = VisionLanguageModel(SMALL, seed=9)
    before = {k: v.data.copy() for k, v in teacher.params.items()}
    train(_tiny(), RECORDS, teacher=teacher, model=VisionLanguageModel(SMALL, seed=1))
    assert all(np.array_equal(before[k], v.data) for k, v in teacher.params.items())


def test_heldout_records_never_trained_on():
    held = [r for r in RECORDS if r.heldout]
    assert held
    cfg = _tiny(objectives=("itm", "mlm"), steps=3)
    full = train(cfg, RECORDS, model=VisionLanguageModel(SMALL, seed=1)).metrics
    kept = train(cfg, [r for r in RECORDS if not r.heldout], model=VisionLanguageModel(SMALL, seed=1)).metrics
    assert full == kept
    with pytest.raises(UsageError):
        train(_tiny(), held, model=VisionLanguageModel(SMALL, seed=1))


def test_non_finite_loss_aborts_with_record():
    model = VisionLanguageModel(SMALL, seed=1)
    next(iter(model.params.values())).data[:] = np.nan
    seen = []
    with pytest.raises(TrainingDiverged) as err:
        train(_tiny(objectives=("itm", "mlm")), RECORDS, model=model, sink=seen.append)
    assert "error" in err.value.record and seen[-1] is err.value.record


def test_metrics_round_trip(tmp_path):
    recs = train(_tiny(objectives=("itm", "mlm"), steps=2), RECORDS,
                 model=VisionLanguageModel(SMALL, seed=1)).metrics
    write_metrics(recs, tmp_path / "m.jsonl")
    assert read_metrics(tmp_path / "m.jsonl") == recs


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nmask_ratio = 0.25\nobjectives = itm, mlm\nteacher = none\n")
    cfg = TrainConfig.from_mapping(read_config(path))
    assert cfg.mask_ratio == 0.25 and cfg.objectives == ("itm", "mlm") and cfg.teacher is None
    with pytest.raises(UsageError):
        TrainConfig.from_mapping({"bogus": "1"})
    with pytest.raises(UsageError):
        TrainConfig(mask_ratio=1.5)
