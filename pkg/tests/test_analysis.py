import numpy as np
import pytest

from epic_lab import analysis as A
from epic_lab.autodiff import UsageError
from epic_lab.generator import GeneratorLM, LMArch, fit_lm
from epic_lab.vlm import VisionLanguageModel, VLMArch
from epic_lab.world import TokenSequence, consistency_oracle, generate_dataset, split_records

SMALL = VLMArch(width=8, heads=2, text_layers=1, vision_layers=1, ffn=8)
RECORDS = generate_dataset(3000, 5)
HELD = split_records(RECORDS)[1]


def test_curve_round_trip(tmp_path):
    a = A.ProbeCurve([0, 1, 2], [0.5, 0.6, 0.7], [0.0, 0.01, 0.02], "vlm", 3)
    b = A.ProbeCurve([0.1, 0.3], [0.9, 0.8], [0.0, 0.0], "lm", 3)
    A.write_curves([a, b], tmp_path / "c.csv")
    back = A.read_curves(tmp_path / "c.csv")
    assert [c.label for c in back] == ["vlm", "lm"]
    assert np.array_equal(back[0].y, a.y) and np.array_equal(back[1].x, b.x) and back[0].seed_count == 3


def test_curve_requires_increasing_x():
    with pytest.raises(UsageError):
        A.ProbeCurve([0, 0], [1, 1], [0, 0], "bad")


def test_aggregate_mean_and_variance():
    c = A.aggregate_curves([A.ProbeCurve([0, 1], [1.0, 3.0], [0, 0], "s"),
                            A.ProbeCurve([0, 1], [3.0, 5.0], [0, 0], "s")])
    assert c.y.tolist() == [2.0, 4.0] and c.var.tolist() == [1.0, 1.0] and c.seed_count == 2


def test_itc_statistics_per_epoch():
    metrics = [{"epoch": 0, "inconsistent_ratio": 0.8, "itc_acc_on_inconsistent": 0.5},
               {"epoch": 0, "inconsistent_ratio": 0.6, "itc_acc_on_inconsistent": 0.7},
               {"epoch": 1, "inconsistent_ratio": 0.4, "itc_acc_on_inconsistent": None}]
    ratio, acc = A.itc_statistics(metrics)
    assert ratio.y.tolist() == pytest.approx([0.7, 0.4])
    assert acc.y[0] == pytest.approx(0.6) and np.isnan(acc.y[1])
    with pytest.raises(UsageError):
        A.itc_statistics([{"epoch": 0, "inconsistent_ratio": None}])


def test_random_scorer_retrieval_is_chance():
    rng = np.random.default_rng(0)
    r = A.eval_retrieval(None, HELD, max_queries=None, scorer=lambda s, sc: rng.random(len(s)))
    assert abs(r["r1_mean"] - 1 / 32) < 0.03


def test_oracle_scorer_retrieval_is_perfect():
    def oracle(seqs, scenes):
        return [float(A._is_match(sc, TokenSequence.from_ids(s))) + 0.0 for s, sc in zip(seqs, scenes)]
    # ties at score 1.0 never happen because negatives are oracle-rejected
    r = A.eval_retrieval(None, HELD, max_queries=100, scorer=oracle)
    assert r["r1_t2i"] == 1.0 and r["r1_i2t"] == 1.0


def test_pool_negatives_never_match():
    queries, t2i, _ = A.retrieval_pools(HELD, max_queries=20)
    for q, negs in zip(queries, t2i):
        assert len(negs) == 31 and q not in negs
        assert not any(A._is_match(HELD[j].scene, HELD[q].caption) for j in negs)


@pytest.fixture(scope="module")
def corrupted():
    lm = GeneratorLM(LMArch(width=16, heads=2, layers=1, ffn=16), seed=0)
    fit_lm(lm, [r.caption.ids for r in split_records(RECORDS)[0]], steps=300, seed=0)
    return A.corrupt_heldout(HELD, lm, seed=0)


def test_corrupted_labels_match_oracle(corrupted):
    assert corrupted.records and corrupted.abstained + len(corrupted.records) == len(HELD)
    for r, seq, lab in zip(corrupted.records[:50], corrupted.seqs, corrupted.labels):
        ok = consistency_oracle(r.scene, TokenSequence.from_ids(seq))
        assert lab == [not x for x in ok]


def test_untrained_models_are_at_chance(corrupted):
    # a single random head has a sizeable spread, so average over several
    runs = [A.eval_consistency_detection(VisionLanguageModel(seed=s), corrupted, head="model") for s in range(8)]
    assert abs(np.mean([r["auc"] for r in runs]) - 0.5) < 0.05
    assert 0.0 < runs[0]["positive_rate"] < 1.0


def test_saliency_contrast_and_hit_rate():
    model = VisionLanguageModel(SMALL, seed=0)
    c = A.saliency_contrast(model, HELD[:100])
    assert c["ratio"] == pytest.approx(c["salient_mean"] / c["function_mean"])
    uni = A.saliency_hit_rate(model, HELD[:100], 0.35, 0, use_saliency=False)
    assert 0.0 < uni < 1.0


def test_masked_accuracy_bounds():
    model = VisionLanguageModel(SMALL, seed=0)
    plans = A._uniform_plans(HELD[:40], 0.15, np.random.default_rng(0))
    assert 0.0 <= A.masked_accuracy(model, HELD[:40], plans) <= 1.0
