import numpy as np
import pytest

from epic_lab.checkpoint import (ArchitectureMismatch, IntegrityError, from_bytes, load_checkpoint,
                                 save_checkpoint, to_bytes)
from epic_lab.generator import GeneratorLM, LMArch
from epic_lab.vlm import VisionLanguageModel, VLMArch

SMALL = VLMArch(width=8, heads=2, text_layers=1, vision_layers=1, ffn=8)


def test_round_trip_is_bitwise(tmp_path):
    model = VisionLanguageModel(SMALL, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path, expect="vlm")
    assert loaded.arch == model.arch and list(loaded.params) == list(model.params)
    for k, v in model.params.items():
        assert loaded.params[k].data.tobytes() == v.data.tobytes()
    assert to_bytes(loaded) == path.read_bytes()


def test_lm_round_trip():
    lm = GeneratorLM(LMArch(width=8, heads=2, layers=1, ffn=8), seed=2)
    back = from_bytes(to_bytes(lm))
    assert all(np.array_equal(back.params[k].data, v.data) for k, v in lm.params.items())


def test_flipped_byte_rejected():
    blob = bytearray(to_bytes(VisionLanguageModel(SMALL)))
    for offset in (10, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[offset] ^= 0x01
        with pytest.raises(IntegrityError):
            from_bytes(bytes(bad))


def test_truncated_and_foreign_files_rejected(tmp_path):
    blob = to_bytes(VisionLanguageModel(SMALL))
    with pytest.raises(IntegrityError):
        from_bytes(blob[:-5])
    with pytest.raises(IntegrityError):
        from_bytes(b"PK\x03\x04" + blob[4:])


def test_lm_loaded_as_vlm_is_architecture_mismatch(tmp_path):
    path = tmp_path / "lm.ckpt"
    save_checkpoint(GeneratorLM(LMArch(width=8, heads=2, layers=1, ffn=8)), path)
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path, expect="vlm")
