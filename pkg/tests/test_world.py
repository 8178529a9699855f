import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epic_lab.world import (COLOR_WORDS, DEFAULT_WORLD, SHAPE_WORDS, VOCAB, DatasetFormatError, Scene,
                            TokenSequence, WorldConfig, consistency_oracle, decode_region, encode_regions,
                            generate_dataset, generate_record, parse_caption, read_dataset,
                            record_from_json, record_to_json, salient_fraction, split_records,
                            write_dataset)

# (shape, color, size, row, col): red circle top-left, blue square below it
SCENE = Scene(((0, 0, 0, 0, 0), (1, 1, 1, 1, 0)), (3, 3))


def labels(words, scene=SCENE):
    return consistency_oracle(scene, ["[CLS]"] + words.split())


def test_true_caption_is_fully_consistent():
    assert all(labels("a red circle on the blue square"))
    assert all(labels("there is a big blue square"))


def test_wrong_color_flags_only_that_token():
    out = labels("a green circle")
    assert out == [True, True, False, True]


def test_wrong_shape_flags_shape():
    assert labels("a red star") == [True, True, True, False]


def test_relation_direction_matters():
    assert all(labels("a red circle above the blue square"))
    out = labels("a blue square above the red circle")
    assert out[4] is False and all(out[:4]) and all(out[5:])


def test_function_words_always_consistent():
    out = labels("a green star left-of the pink heart")
    words = ["[CLS]"] + "a green star left-of the pink heart".split()
    for w, ok in zip(words, out):
        if w in ("a", "the", "[CLS]"):
            assert ok


def test_more_phrases_than_objects():
    scene = Scene(((0, 0, 0, 0, 0),), (3, 3))
    out = labels("a red circle and the red circle", scene)
    # only one phrase can ground to the single object; either one may
    assert out == [True] * 8


def test_unparseable_abstains():
    assert labels("circle red a") is None
    assert labels("a red") is None
    assert consistency_oracle(SCENE, ["a", "red", "circle"]) is None


def test_parse_structure():
    p = parse_caption(["[CLS]"] + "there is a small red circle is above the square".split())
    assert len(p.nps) == 2 and p.relations == [(8, 0, 1)]
    assert p.nps[0].attrs == [4, 5] and p.nps[0].shape == 6


def test_generated_captions_consistent_with_their_scene():
    for rec in generate_dataset(300, 3):
        assert all(consistency_oracle(rec.scene, rec.caption))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 40), st.data())
def test_substituting_an_absent_shape_is_inconsistent(seed, data):
    rec = generate_record(seed)
    present = {o[0] for o in rec.scene.objects}
    absent = [w for i, w in enumerate(SHAPE_WORDS[:DEFAULT_WORLD.n_shapes]) if i not in present]
    shape_pos = [i for i, w in enumerate(rec.caption.words) if w in SHAPE_WORDS]
    pos = data.draw(st.sampled_from(shape_pos))
    new = data.draw(st.sampled_from(absent))
    words = list(rec.caption.words)
    words[pos] = new
    out = consistency_oracle(rec.scene, words)
    assert out is not None and out[pos] is False


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 40), st.data())
def test_substituting_an_unused_color_is_inconsistent(seed, data):
    rec = generate_record(seed)
    used = {o[1] for o in rec.scene.objects}
    colors = [w for i, w in enumerate(COLOR_WORDS[:DEFAULT_WORLD.n_colors]) if i not in used]
    color_pos = [i for i, w in enumerate(rec.caption.words) if w in COLOR_WORDS]
    pos = data.draw(st.sampled_from(color_pos))
    words = list(rec.caption.words)
    words[pos] = data.draw(st.sampled_from(colors))
    out = consistency_oracle(rec.scene, words)
    assert out is not None and out[pos] is False


def test_color_marginals_uniform_and_shape_correlated():
    recs = generate_dataset(3000, 1)
    objs = [o for r in recs for o in r.scene.objects]
    counts = [sum(o[1] == c for o in objs) for c in range(DEFAULT_WORLD.n_colors)]
    expected = len(objs) / DEFAULT_WORLD.n_colors
    assert max(abs(c - expected) for c in counts) < 4 * expected ** 0.5
    typical = sum(o[1] == o[0] % DEFAULT_WORLD.n_colors for o in objs) / len(objs)
    assert typical == pytest.approx(0.5 + 0.5 / DEFAULT_WORLD.n_colors, abs=0.03)


def test_region_encoding_round_trip():
    ids = encode_regions(SCENE)
    assert ids[0] == 0
    for rid, (shape, color, size, row, col) in zip(ids[1:], SCENE.objects):
        assert decode_region(rid) == (shape, color, size, row * 3 + col)
    assert max(ids) < DEFAULT_WORLD.n_region_ids


def test_heldout_split_by_seed():
    recs = generate_dataset(1000, 0)
    train, held = split_records(recs)
    assert all(r.record_seed % 10 == 0 for r in held)
    assert len(train) + len(held) == 1000
    assert 60 < len(held) < 140


def test_generation_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(generate_dataset(200, 7), a)
    write_dataset(generate_dataset(200, 7), b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_dataset_round_trip(tmp_path):
    recs = generate_dataset(1000, 2)
    path = tmp_path / "d.jsonl"
    write_dataset(recs, path)
    assert read_dataset(path) == recs


def test_bad_line_reports_line_number(tmp_path):
    recs = generate_dataset(3, 0)
    lines = [record_to_json(r) for r in recs]
    lines[1] = lines[1].replace('"tokens":["[CLS]"', '"tokens":["[CLS]","zebra"')
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(path)
    assert err.value.line == 2


def test_record_json_rejects_inconsistent_salient_flags():
    line = record_to_json(generate_record(5)).replace('"salient":[false', '"salient":[true')
    with pytest.raises(DatasetFormatError):
        record_from_json(line)


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(((0, 0, 0, 0, 0), (1, 1, 0, 0, 0)), (3, 3))
    with pytest.raises(ValueError):
        Scene(((0, 0, 0, 3, 0),), (3, 3))
    with pytest.raises(ValueError):
        WorldConfig(n_shapes=0)


def test_salient_fraction_and_classes():
    cap = TokenSequence.from_words(["[CLS]", "a", "red", "circle", "left-of", "the", "square"])
    assert cap.classes[0] == "special"
    assert salient_fraction([cap]) == pytest.approx(4 / 6)
    assert cap.content_positions() == [1, 2, 3, 4, 5, 6]
    assert len(VOCAB) == len(set(VOCAB.words))
