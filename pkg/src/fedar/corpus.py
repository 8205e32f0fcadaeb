"""Review corpora: records, vocabulary, embeddings, splits and synthetic data."""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_SEQ_LEN = 400


class CorpusError(ValueError):
    """Bad corpus, embedding or synthetic-spec input."""


class CorpusFormatError(CorpusError):
    pass


class CorpusSchemaError(CorpusError):
    pass


class RatingRangeError(CorpusError):
    pass


@dataclass(frozen=True)
class Review:
    id: str
    tokens: tuple[str, ...]
    aspect_labels: tuple[int, ...]
    pos_tags: tuple[str, ...] | None = None
    overall_rating: int | None = None
    split: str | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise CorpusSchemaError(f"review {self.id!r} has no tokens")
        if self.pos_tags is not None and len(self.pos_tags) != len(self.tokens):
            raise CorpusSchemaError(
                f"review {self.id!r}: {len(self.pos_tags)} POS tags for {len(self.tokens)} tokens"
            )
        if self.split is not None and self.split not in SPLITS:
            raise CorpusSchemaError(f"review {self.id!r}: unknown split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    reviews: tuple[Review, ...]
    num_aspects: int
    num_classes: int
    aspect_names: tuple[str, ...]
    rating_min: int = 1

    def __post_init__(self):
        if len(self.aspect_names) != self.num_aspects:
            raise CorpusSchemaError(
                f"{len(self.aspect_names)} aspect names for {self.num_aspects} aspects"
            )
        for r in self.reviews:
            if len(r.aspect_labels) != self.num_aspects:
                raise CorpusSchemaError(
                    f"review {r.id!r} has {len(r.aspect_labels)} labels, expected {self.num_aspects}"
                )
            labels = list(r.aspect_labels)
            if r.overall_rating is not None:
                labels.append(r.overall_rating)
            if any(not 0 <= y < self.num_classes for y in labels):
                raise RatingRangeError(f"review {r.id!r} has a label outside 0..{self.num_classes - 1}")

    @property
    def rating_scale(self) -> tuple[int, int]:
        return self.rating_min, self.rating_min + self.num_classes - 1

    def rating_of(self, class_index):
        """Map class indices back onto the rating scale."""
        return np.asarray(class_index) + self.rating_min

    def split(self, name: str) -> list[Review]:
        return [r for r in self.reviews if r.split == name]

    def subset(self, name: str) -> "Corpus":
        return replace(self, reviews=tuple(self.split(name)))

    def __len__(self) -> int:
        return len(self.reviews)

    @property
    def has_pos(self) -> bool:
        return bool(self.reviews) and all(r.pos_tags is not None for r in self.reviews)


@dataclass(frozen=True)
class CorpusSchema:
    """How to read a corpus file: aspect count and the rating scale."""

    num_aspects: int | None = None
    rating_min: int = 1
    rating_max: int = 5
    aspect_names: tuple[str, ...] | None = None

    @property
    def num_classes(self) -> int:
        return self.rating_max - self.rating_min + 1


# ---------------------------------------------------------------- file I/O


def _rating_to_class(value, schema: CorpusSchema, review_id: str, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CorpusFormatError(f"review {review_id!r}: {what} must be an integer, got {value!r}")
    if not schema.rating_min <= value <= schema.rating_max:
        raise RatingRangeError(
            f"review {review_id!r}: {what} {value} outside scale {schema.rating_min}-{schema.rating_max}"
        )
    return value - schema.rating_min


def parse_record(record: dict, schema: CorpusSchema, num_aspects: int) -> Review:
    rid = record.get("id")
    if not isinstance(rid, str):
        raise CorpusFormatError(f"record is missing a string 'id': {record!r:.80}")
    tokens = record.get("tokens")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusFormatError(f"review {rid!r}: 'tokens' must be a list of strings")
    labels = record.get("labels")
    if not isinstance(labels, list):
        raise CorpusFormatError(f"review {rid!r}: 'labels' must be a list of integers")
    if len(labels) != num_aspects:
        raise CorpusSchemaError(f"review {rid!r} has {len(labels)} labels, expected {num_aspects}")
    pos = record.get("pos")
    overall = record.get("overall")
    return Review(
        id=rid,
        tokens=tuple(tokens),
        aspect_labels=tuple(_rating_to_class(v, schema, rid, "label") for v in labels),
        pos_tags=tuple(pos) if pos is not None else None,
        overall_rating=None if overall is None else _rating_to_class(overall, schema, rid, "overall"),
        split=record.get("split"),
    )


def load_corpus(path: str | Path, schema: CorpusSchema | None = None) -> Corpus:
    """Read a JSON-lines corpus; labels are ratings on ``schema``'s scale."""
    schema = schema or CorpusSchema()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    reviews = []
    num_aspects = schema.num_aspects
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusFormatError(f"{path}:{lineno}: record is not an object")
            if num_aspects is None:
                labels = record.get("labels")
                num_aspects = len(labels) if isinstance(labels, list) else 0
            try:
                reviews.append(parse_record(record, schema, num_aspects))
            except CorpusError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
    if not reviews:
        raise CorpusFormatError(f"{path}: no records")
    names = schema.aspect_names or tuple(f"aspect{k}" for k in range(num_aspects))
    return Corpus(
        reviews=tuple(reviews),
        num_aspects=num_aspects,
        num_classes=schema.num_classes,
        aspect_names=tuple(names),
        rating_min=schema.rating_min,
    )


def review_to_record(review: Review, rating_min: int = 1) -> dict:
    record = {
        "id": review.id,
        "tokens": list(review.tokens),
        "labels": [y + rating_min for y in review.aspect_labels],
    }
    if review.pos_tags is not None:
        record["pos"] = list(review.pos_tags)
    if review.overall_rating is not None:
        record["overall"] = review.overall_rating + rating_min
    if review.split is not None:
        record["split"] = review.split
    return record


def dump_corpus(corpus: Corpus) -> str:
    return "".join(
        json.dumps(review_to_record(r, corpus.rating_min), ensure_ascii=False) + "\n"
        for r in corpus.reviews
    )


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    from fedar.io import atomic_write_text

    atomic_write_text(path, dump_corpus(corpus))


def schema_for(corpus: Corpus) -> CorpusSchema:
    lo, hi = corpus.rating_scale
    return CorpusSchema(corpus.num_aspects, lo, hi, corpus.aspect_names)


# ---------------------------------------------------------------- splitting


def split_dataset(corpus: Corpus, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 42) -> Corpus:
    """Assign train/dev/test to reviews that have no split yet.

    Counts are rounded per split with test taking the remainder.
    """
    if not corpus.reviews:
        raise ValueError("cannot split an empty corpus")
    if len(ratios) != 3 or abs(np.sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    free = [i for i, r in enumerate(corpus.reviews) if r.split is None]
    if not free:
        return corpus
    order = np.random.default_rng(seed).permutation(len(free))
    n = len(free)
    n_train = int(round(ratios[0] * n))
    n_dev = min(int(round(ratios[1] * n)), n - n_train)
    reviews = list(corpus.reviews)
    for rank, j in enumerate(order):
        name = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
        i = free[j]
        reviews[i] = replace(reviews[i], split=name)
    return replace(corpus, reviews=tuple(reviews))


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    frequencies: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index and self._index[word] > UNK

    def index(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode(self, tokens: Iterable[str], max_len: int = MAX_SEQ_LEN) -> np.ndarray:
        ids = [self.index(t) for t in tokens][:max_len]
        return np.asarray(ids, dtype=np.int64)

    def to_json(self) -> dict:
        return {"words": list(self.words), "frequencies": dict(sorted(self.frequencies.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["words"]), dict(obj.get("frequencies", {})))


def build_vocabulary(corpus: Corpus | Iterable[Review], min_freq: int = 1) -> Vocabulary:
    """Index words by descending frequency, ties broken alphabetically.

    Indices 0 and 1 are padding and unknown.  The frequency table keeps every
    word, including the ones below ``min_freq``.
    """
    reviews = corpus.reviews if isinstance(corpus, Corpus) else list(corpus)
    if not reviews:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    freq = Counter(t for r in reviews for t in r.tokens)
    kept = sorted((w for w, c in freq.items() if c >= min_freq), key=lambda w: (-freq[w], w))
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *kept), dict(freq))


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    trainable: bool = False
    coverage: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def load_pretrained_embeddings(
    path: str | Path, vocab: Vocabulary, seed: int = 42, dtype=np.float32
) -> EmbeddingMatrix:
    """Read GloVe-style text vectors for the words in ``vocab``.

    Words missing from the file get rows drawn from U(-0.1, 0.1); the padding
    row is zero.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    found: dict[str, np.ndarray] = {}
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or not parts[0]:
                continue
            word, values = parts[0], [v for v in parts[1:] if v]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise CorpusFormatError(f"{path}:{lineno}: no vector values")
            elif len(values) != dim:
                raise CorpusFormatError(
                    f"{path}:{lineno}: vector width {len(values)} differs from {dim}"
                )
            if word in vocab and word not in found:
                try:
                    found[word] = np.asarray([float(v) for v in values], dtype=np.float64)
                except ValueError:
                    raise CorpusFormatError(f"{path}:{lineno}: non-numeric vector value") from None
    if dim is None:
        raise CorpusFormatError(f"{path}: empty embedding file")
    matrix = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(len(vocab), dim))
    matrix[PAD] = 0.0
    for word, vec in found.items():
        matrix[vocab.index(word)] = vec
    coverage = len(found) / max(len(vocab) - 2, 1)
    logger.info("embeddings: %d/%d vocabulary words covered", len(found), len(vocab) - 2)
    return EmbeddingMatrix(matrix.astype(dtype), trainable=False, coverage=coverage)


def random_embeddings(vocab: Vocabulary, dim: int, seed: int = 42, dtype=np.float32) -> EmbeddingMatrix:
    """Stand-in for pretrained vectors when none are available."""
    matrix = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(len(vocab), dim))
    matrix[PAD] = 0.0
    return EmbeddingMatrix(matrix.astype(dtype), trainable=False, coverage=0.0)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-keyword corpus recipe.

    ``keywords[k][c]`` lists the words that signal class ``c`` for aspect ``k``.
    Each review has one segment per aspect; a segment has a length drawn from
    ``length_range`` and each position is a noise word with probability
    ``noise_rate``, but at least ``min_keywords`` positions carry keywords.
    """

    aspects: tuple[str, ...]
    classes: int
    keywords: tuple[tuple[tuple[str, ...], ...], ...]
    reviews_per_cell: int
    length_range: tuple[int, int] = (3, 8)
    noise_rate: float = 0.0
    noise_vocab: tuple[str, ...] = ()
    rating_min: int = 1
    min_keywords: int = 1
    num_reviews: int | None = None
    keyword_pos: str = "NOUN"
    noise_pos: str = "NOUN"
    with_overall: bool = True

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise CorpusSchemaError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        aspects = obj["aspects"]
        if isinstance(aspects, int):
            aspects = [f"aspect{k}" for k in range(aspects)]
        obj["aspects"] = tuple(aspects)
        obj["keywords"] = tuple(tuple(tuple(ws) for ws in per_aspect) for per_aspect in obj["keywords"])
        obj["length_range"] = tuple(obj.get("length_range", (3, 8)))
        obj["noise_vocab"] = tuple(obj.get("noise_vocab", ()))
        return cls(**obj)

    def to_dict(self) -> dict:
        return {
            "aspects": list(self.aspects),
            "classes": self.classes,
            "keywords": [[list(ws) for ws in per_aspect] for per_aspect in self.keywords],
            "reviews_per_cell": self.reviews_per_cell,
            "length_range": list(self.length_range),
            "noise_rate": self.noise_rate,
            "noise_vocab": list(self.noise_vocab),
            "rating_min": self.rating_min,
            "min_keywords": self.min_keywords,
            "num_reviews": self.num_reviews,
            "keyword_pos": self.keyword_pos,
            "noise_pos": self.noise_pos,
            "with_overall": self.with_overall,
        }


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"synthetic spec not found: {path}")
    with path.open(encoding="utf-8") as fh:
        obj = yaml.safe_load(fh)
    if not isinstance(obj, dict):
        raise CorpusSchemaError(f"{path}: synthetic spec must be a mapping")
    return SyntheticSpec.from_dict(obj)


def _validate_spec(spec: SyntheticSpec) -> None:
    K, N = len(spec.aspects), spec.classes
    if K < 1 or N < 2:
        raise CorpusSchemaError("synthetic spec needs at least one aspect and two classes")
    if len(spec.keywords) != K:
        raise CorpusSchemaError(f"keywords given for {len(spec.keywords)} aspects, expected {K}")
    for k, per_aspect in enumerate(spec.keywords):
        if len(per_aspect) != N:
            raise CorpusSchemaError(f"aspect {k}: keywords for {len(per_aspect)} classes, expected {N}")
        for c, words in enumerate(per_aspect):
            if not words:
                raise CorpusSchemaError(f"empty keyword list for aspect {k}, class {c}")
    lo, hi = spec.length_range
    if not 1 <= lo <= hi:
        raise CorpusSchemaError(f"bad length_range {spec.length_range}")
    if not 0 <= spec.noise_rate <= 1:
        raise CorpusSchemaError(f"noise_rate must lie in [0, 1], got {spec.noise_rate}")
    if spec.noise_rate > 0 and not spec.noise_vocab:
        raise CorpusSchemaError("noise_rate > 0 needs a non-empty noise_vocab")
    if not 0 <= spec.min_keywords <= lo:
        raise CorpusSchemaError("min_keywords must lie in [0, length_range[0]]")


def generate_synthetic_corpus(spec: SyntheticSpec | dict, seed: int = 42) -> Corpus:
    """Build a planted-keyword corpus; identical spec and seed give identical output."""
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    _validate_spec(spec)
    rng = np.random.default_rng(seed)
    K, N = len(spec.aspects), spec.classes
    cells = list(itertools.product(range(N), repeat=K))
    if spec.num_reviews is not None:
        plan = [cells[i % len(cells)] for i in range(spec.num_reviews)]
    else:
        plan = [cell for cell in cells for _ in range(spec.reviews_per_cell)]

    lo, hi = spec.length_range
    drafts = []
    for labels in plan:
        tokens: list[str] = []
        tags: list[str] = []
        for k, y in enumerate(labels):
            length = int(rng.integers(lo, hi + 1))
            n_kw = int(rng.binomial(length, 1.0 - spec.noise_rate))
            n_kw = min(length, max(n_kw, spec.min_keywords))
            is_kw = np.zeros(length, dtype=bool)
            is_kw[rng.choice(length, size=n_kw, replace=False)] = True
            words = spec.keywords[k][y]
            for planted in is_kw:
                if planted:
                    tokens.append(words[int(rng.integers(len(words)))])
                    tags.append(spec.keyword_pos)
                else:
                    tokens.append(spec.noise_vocab[int(rng.integers(len(spec.noise_vocab)))])
                    tags.append(spec.noise_pos)
        overall = int(np.floor(np.mean(labels) + 0.5)) if spec.with_overall else None
        drafts.append((tuple(tokens), tuple(tags), tuple(labels), overall))

    order = rng.permutation(len(drafts))
    width = len(str(max(len(drafts) - 1, 0)))
    reviews = tuple(
        Review(
            id=f"syn-{i:0{width}d}",
            tokens=drafts[j][0],
            pos_tags=drafts[j][1],
            aspect_labels=drafts[j][2],
            overall_rating=drafts[j][3],
        )
        for i, j in enumerate(order)
    )
    return Corpus(
        reviews=reviews,
        num_aspects=K,
        num_classes=N,
        aspect_names=spec.aspects,
        rating_min=spec.rating_min,
    )


def keyword_majority_predict(review: Review, spec: SyntheticSpec) -> tuple[int, ...]:
    """Bag-of-keywords majority vote; ties go to the lower class."""
    labels = []
    for per_aspect in spec.keywords:
        counts = [np.sum([t in set(words) for t in review.tokens]) for words in per_aspect]
        labels.append(int(np.argmax(counts)))
    return tuple(labels)
