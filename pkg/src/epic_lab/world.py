"""Symbolic scene/caption world with an exact per-token consistency oracle.

Scenes are small sets of attributed objects on a grid. Captions come from a
closed grammar::

    S    -> ["there" "is"] NP (CONN NP)*
    CONN -> "and" | REL | "is" REL
    NP   -> DET [SIZE] [COLOR] SHAPE

so any caption, and any same-class substitution into it, can be parsed back and
checked against the scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import UsageError

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_WORDS = (PAD, CLS, SEP, MASK)
SHAPE_WORDS = ("circle", "square", "triangle", "star", "heart", "cross",
               "diamond", "hexagon", "ring", "arrow")
COLOR_WORDS = ("red", "blue", "green", "yellow", "purple", "orange",
               "white", "black", "pink", "gray")
SIZE_WORDS = ("small", "big", "medium")
RELATION_WORDS = ("left-of", "above", "on")
FUNCTION_WORDS = ("a", "the", "and", "there", "is")

ATTRIBUTE, NOUN, RELATION, FUNCTION, SPECIAL = "attribute", "noun", "relation", "function", "special"
SALIENT_CLASSES = frozenset({ATTRIBUTE, NOUN, RELATION})

MAX_CAPTION_TOKENS = 24


class DatasetFormatError(ValueError):
    """Malformed dataset line; ``line`` is 1-based."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class Vocabulary:
    """Closed word <-> id map shared by every text model."""

    def __init__(self, words: Sequence[str] | None = None):
        if words is None:
            words = (SPECIAL_WORDS + SHAPE_WORDS + COLOR_WORDS + SIZE_WORDS
                     + RELATION_WORDS + FUNCTION_WORDS)
        if len(set(words)) != len(words):
            raise UsageError("duplicate vocabulary words")
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.index[PAD]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]
        self.mask_id = self.index[MASK]
        self.special_ids = frozenset((self.pad_id, self.cls_id, self.sep_id, self.mask_id))
        self.classes = tuple(word_class(w) for w in self.words)

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise UsageError(f"unknown word {word!r}") from None

    def word(self, i: int) -> str:
        return self.words[i]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]


def word_class(word: str) -> str:
    if word in SHAPE_WORDS:
        return NOUN
    if word in COLOR_WORDS or word in SIZE_WORDS:
        return ATTRIBUTE
    if word in RELATION_WORDS:
        return RELATION
    if word in FUNCTION_WORDS:
        return FUNCTION
    if word in SPECIAL_WORDS:
        return SPECIAL
    raise UsageError(f"unknown word {word!r}")


VOCAB = Vocabulary()


@dataclass(frozen=True)
class WorldConfig:
    n_shapes: int = 6
    n_colors: int = 6
    n_sizes: int = 2
    grid: tuple[int, int] = (3, 3)
    min_objects: int = 1
    max_objects: int = 3
    # probability that an object takes its shape's typical colour; keeps colour
    # marginals uniform when n_shapes is a multiple of n_colors
    color_bias: float = 0.5
    size_prob: float = 0.3

    def __post_init__(self):
        if not (1 <= self.n_shapes <= len(SHAPE_WORDS) and 1 <= self.n_colors <= len(COLOR_WORDS)
                and 1 <= self.n_sizes <= len(SIZE_WORDS)):
            raise UsageError("attribute vocabulary sizes out of range")
        if not 1 <= self.min_objects <= self.max_objects:
            raise UsageError("object count bounds invalid")

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_region_ids(self) -> int:
        return 1 + self.n_shapes * self.n_colors * self.n_sizes * self.n_cells

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


DEFAULT_WORLD = WorldConfig()


@dataclass(frozen=True)
class Scene:
    objects: tuple[tuple[int, int, int, int, int], ...]  # (shape, color, size, row, col)
    grid: tuple[int, int]

    def __post_init__(self):
        cells = [(o[3], o[4]) for o in self.objects]
        if not self.objects or len(set(cells)) != len(cells):
            raise UsageError("scene needs >= 1 object at distinct positions")
        rows, cols = self.grid
        if any(not (0 <= r < rows and 0 <= c < cols) for r, c in cells):
            raise UsageError("object outside the grid")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    words: tuple[str, ...]
    salient: tuple[bool, ...]
    classes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_words(cls, words: Sequence[str], vocab: Vocabulary = VOCAB) -> "TokenSequence":
        classes = tuple(word_class(w) for w in words)
        return cls(tuple(vocab.encode(words)), tuple(words),
                   tuple(c in SALIENT_CLASSES for c in classes), classes)

    @classmethod
    def from_ids(cls, ids: Sequence[int], vocab: Vocabulary = VOCAB) -> "TokenSequence":
        return cls.from_words(vocab.decode(ids), vocab)

    def content_positions(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c != SPECIAL]


@dataclass(frozen=True)
class DatasetRecord:
    scene: Scene
    caption: TokenSequence
    record_seed: int

    @property
    def heldout(self) -> bool:
        """Fixed 10% evaluation split keyed by record seed."""
        return self.record_seed % 10 == 0


# ---------------------------------------------------------------- generation


def generate_scene(seed: int, cfg: WorldConfig = DEFAULT_WORLD) -> Scene:
    if cfg.max_objects > cfg.n_cells:
        raise UsageError(f"grid {cfg.grid} cannot hold {cfg.max_objects} objects")
    rng = np.random.default_rng([seed, 11])
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = rng.choice(cfg.n_cells, size=k, replace=False)
    objects = []
    for cell in cells:
        shape = int(rng.integers(cfg.n_shapes))
        if rng.random() < cfg.color_bias:
            color = shape % cfg.n_colors
        else:
            color = int(rng.integers(cfg.n_colors))
        size = int(rng.integers(cfg.n_sizes))
        objects.append((shape, color, size, int(cell) // cfg.grid[1], int(cell) % cfg.grid[1]))
    return Scene(tuple(objects), tuple(cfg.grid))


def relation_holds(rel: str, a: tuple, b: tuple) -> bool:
    """Spatial predicate ``a REL b`` on (shape, color, size, row, col) objects."""
    if rel == "left-of":
        return a[4] < b[4]
    if rel == "above":
        return a[3] < b[3]
    if rel == "on":
        return a[3] == b[3] - 1 and a[4] == b[4]
    raise UsageError(f"unknown relation {rel!r}")


def _noun_phrase(obj: tuple, rng: np.random.Generator, size_prob: float) -> list[str]:
    words = [FUNCTION_WORDS[int(rng.integers(2))]]  # "a" / "the"
    if rng.random() < size_prob:
        words.append(SIZE_WORDS[obj[2]])
    words += [COLOR_WORDS[obj[1]], SHAPE_WORDS[obj[0]]]
    return words


def _true_relation(a, b, rng) -> tuple[str, bool] | None:
    """Pick a relation true for (a, b) or, failing that, (b, a)."""
    for swapped, (x, y) in ((False, (a, b)), (True, (b, a))):
        options = [r for r in RELATION_WORDS if relation_holds(r, x, y)]
        if options:
            return options[int(rng.integers(len(options)))], swapped
    return None


def generate_caption(scene: Scene, seed: int, size_prob: float = DEFAULT_WORLD.size_prob,
                     vocab: Vocabulary = VOCAB) -> TokenSequence:
    rng = np.random.default_rng([seed, 23])
    objs = list(scene.objects)
    n = len(objs)
    templates = ["np", "there-is"]
    if n >= 2:
        templates += ["and", "rel", "is-rel"]
    if n >= 3:
        templates += ["rel-and", "and-and"]
    template = templates[int(rng.integers(len(templates)))]
    order = [objs[i] for i in rng.permutation(n)]
    np_ = lambda o: _noun_phrase(o, rng, size_prob)  # noqa: E731

    words = [CLS]
    if template == "np":
        words += np_(order[0])
    elif template == "there-is":
        words += ["there", "is"] + np_(order[0])
    elif template == "and":
        words += np_(order[0]) + ["and"] + np_(order[1])
    elif template == "and-and":
        words += np_(order[0]) + ["and"] + np_(order[1]) + ["and"] + np_(order[2])
    else:
        rel, swapped = _true_relation(order[0], order[1], rng)
        a, b = (order[1], order[0]) if swapped else (order[0], order[1])
        words += np_(a) + (["is", rel] if template == "is-rel" else [rel]) + np_(b)
        if template == "rel-and":
            words += ["and"] + np_(order[2])
    assert len(words) <= MAX_CAPTION_TOKENS
    return TokenSequence.from_words(words, vocab)


def generate_record(record_seed: int, cfg: WorldConfig = DEFAULT_WORLD) -> DatasetRecord:
    scene = generate_scene(record_seed, cfg)
    return DatasetRecord(scene, generate_caption(scene, record_seed, cfg.size_prob), record_seed)


def generate_dataset(n: int, seed: int, cfg: WorldConfig = DEFAULT_WORLD) -> list[DatasetRecord]:
    seeds = np.random.default_rng([seed, 5]).choice(2 ** 40, size=n, replace=False)
    return [generate_record(int(s), cfg) for s in seeds]


def split_records(records: Sequence[DatasetRecord]) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """(train, heldout) by the fixed record-seed split."""
    train = [r for r in records if not r.heldout]
    held = [r for r in records if r.heldout]
    return train, held


def encode_regions(scene: Scene, cfg: WorldConfig = DEFAULT_WORLD) -> list[int]:
    """Visual [CLS] (id 0) followed by one composite id per object."""
    ids = [0]
    for shape, color, size, row, col in scene.objects:
        cell = row * scene.grid[1] + col
        ids.append(1 + ((shape * cfg.n_colors + color) * cfg.n_sizes + size) * cfg.n_cells + cell)
    return ids


def decode_region(region_id: int, cfg: WorldConfig = DEFAULT_WORLD) -> tuple[int, int, int, int]:
    """Inverse of the per-object encoding: (shape, color, size, cell)."""
    rest, cell = divmod(region_id - 1, cfg.n_cells)
    rest, size = divmod(rest, cfg.n_sizes)
    shape, color = divmod(rest, cfg.n_colors)
    return shape, color, size, cell


# ---------------------------------------------------------------- oracle


@dataclass
class _NP:
    det: int
    shape: int | None = None
    attrs: list[int] = field(default_factory=list)


@dataclass
class Parse:
    nps: list[_NP]
    relations: list[tuple[int, int, int]]  # (token position, left np, right np)


def parse_caption(words: Sequence[str]) -> Parse | None:
    """Parse a caption; None when it is outside the grammar."""
    if not words or words[0] != CLS:
        return None
    pos = 1
    n = len(words)
    if pos + 1 < n and words[pos] == "there" and words[pos + 1] == "is":
        pos += 2
    nps: list[_NP] = []
    rels: list[tuple[int, int, int]] = []

    def read_np(p):
        if p >= n or words[p] not in ("a", "the"):
            return None, p
        np_ = _NP(det=p)
        p += 1
        if p < n and words[p] in SIZE_WORDS:
            np_.attrs.append(p)
            p += 1
        if p < n and words[p] in COLOR_WORDS:
            np_.attrs.append(p)
            p += 1
        if p >= n or words[p] not in SHAPE_WORDS:
            return None, p
        np_.shape = p
        return np_, p + 1

    first, pos = read_np(pos)
    if first is None:
        return None
    nps.append(first)
    while pos < n:
        w = words[pos]
        rel_pos = None
        if w == "and":
            pos += 1
        elif w in RELATION_WORDS:
            rel_pos = pos
            pos += 1
        elif w == "is" and pos + 1 < n and words[pos + 1] in RELATION_WORDS:
            rel_pos = pos + 1
            pos += 2
        else:
            return None
        nxt, pos = read_np(pos)
        if nxt is None:
            return None
        if rel_pos is not None:
            rels.append((rel_pos, len(nps) - 1, len(nps)))
        nps.append(nxt)
    return Parse(nps, rels)


def _attr_matches(word: str, obj: tuple) -> bool:
    if word in COLOR_WORDS:
        return COLOR_WORDS.index(word) == obj[1]
    return SIZE_WORDS.index(word) == obj[2]


def groundings(n_nps: int, n_objects: int):
    """Maximal injective assignments of objects to noun phrases.

    Phrases beyond the object count stay unassigned (None). Non-maximal partial
    assignments are never needed: filling an unassigned phrase with a free object
    can only add satisfied tokens.
    """
    slots = list(range(n_objects)) + [None] * max(0, n_nps - n_objects)
    seen = set()
    for perm in permutations(slots, n_nps):
        if perm not in seen:
            seen.add(perm)
            yield perm


def consistency_oracle(scene: Scene, sentence: TokenSequence | Sequence[str]) -> list[bool] | None:
    """Per-token consistency labels (True = consistent), or None to abstain.

    Noun phrases are grounded to distinct scene objects. Among all groundings the
    optimal ones maximise, lexicographically, the number of satisfied nouns, then
    attributes, then relations. A content token is consistent iff it is satisfied
    under at least one optimal grounding; function and special tokens always are.
    """
    words = list(sentence.words if isinstance(sentence, TokenSequence) else sentence)
    parse = parse_caption(words)
    if parse is None:
        return None
    objs = scene.objects
    best_score = None
    best_sat: list[set[int]] = []
    for g in groundings(len(parse.nps), len(objs)):
        sat: set[int] = set()
        score = [0, 0, 0]
        for k, np_ in enumerate(parse.nps):
            if g[k] is None:
                continue
            obj = objs[g[k]]
            if SHAPE_WORDS.index(words[np_.shape]) == obj[0]:
                sat.add(np_.shape)
                score[0] += 1
            for p in np_.attrs:
                if _attr_matches(words[p], obj):
                    sat.add(p)
                    score[1] += 1
        for p, i, j in parse.relations:
            if g[i] is not None and g[j] is not None and relation_holds(words[p], objs[g[i]], objs[g[j]]):
                sat.add(p)
                score[2] += 1
        score = tuple(score)
        if best_score is None or score > best_score:
            best_score, best_sat = score, [sat]
        elif score == best_score:
            best_sat.append(sat)
    ok = set().union(*best_sat) if best_sat else set()
    return [word_class(w) not in SALIENT_CLASSES or i in ok for i, w in enumerate(words)]


# ---------------------------------------------------------------- persistence


def record_to_json(rec: DatasetRecord) -> str:
    return json.dumps({
        "seed": rec.record_seed,
        "grid": list(rec.scene.grid),
        "objects": [list(o) for o in rec.scene.objects],
        "tokens": list(rec.caption.words),
        "salient": list(rec.caption.salient),
        "classes": list(rec.caption.classes),
    }, separators=(",", ":"))


def record_from_json(line: str, lineno: int = 1, vocab: Vocabulary = VOCAB) -> DatasetRecord:
    try:
        d = json.loads(line)
        scene = Scene(tuple(tuple(int(v) for v in o) for o in d["objects"]),
                      tuple(int(v) for v in d["grid"]))
        if any(len(o) != 5 for o in scene.objects):
            raise ValueError("objects must be 5-tuples")
        caption = TokenSequence.from_words(d["tokens"], vocab)
        if list(caption.salient) != list(d["salient"]) or list(caption.classes) != list(d["classes"]):
            raise ValueError("salient/classes disagree with tokens")
        return DatasetRecord(scene, caption, int(d["seed"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(lineno, str(exc) or type(exc).__name__) from exc


def write_dataset(records: Iterable[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_dataset(path, vocab: Vocabulary = VOCAB) -> list[DatasetRecord]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [record_from_json(line, i + 1, vocab) for i, line in enumerate(lines)]


def salient_fraction(captions: Iterable[TokenSequence]) -> float:
    n = s = 0
    for c in captions:
        for cl in c.classes:
            if cl != SPECIAL:
                n += 1
                s += cl in SALIENT_CLASSES
    return s / n if n else math.nan
