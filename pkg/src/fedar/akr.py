"""Attention-driven keyword ranking.

A word's score for aspect k is the attention mass it receives across a corpus
divided by its corpus frequency plus a smoothing constant gamma.  Restricting
the corpus to reviews with a given gold label for k gives opinion keywords.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedar.corpus import Review
from fedar.io import sig

logger = logging.getLogger(__name__)

ASPECT_TAGS = frozenset({"NOUN", "PROPN"})
OPINION_TAGS = frozenset({"ADJ", "ADV", "VERB"})
DEFAULT_GAMMA = 1.0
DEFAULT_TOP_K = 50


class KeywordError(ValueError):
    pass


@dataclass
class AttentionIndex:
    """Accumulated attention per review and aspect, with the tokens it falls on."""

    review_ids: list[str]
    tokens: list[tuple[str, ...]]
    pos_tags: list[tuple[str, ...] | None]
    labels: np.ndarray                  # (n, K) gold class indices
    weights: list[list[np.ndarray]]     # weights[i][k] has length len(tokens[i])
    split: str = "test"
    deliberation: bool = True
    frequencies: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if not self.frequencies:
            self.frequencies = Counter(t for toks in self.tokens for t in toks)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_aspects(self) -> int:
        return self.labels.shape[1]

    @property
    def has_pos(self) -> bool:
        return bool(self.pos_tags) and all(p is not None for p in self.pos_tags)

    def rows_with_label(self, k: int, label: int) -> list[int]:
        return [i for i in range(len(self)) if self.labels[i, k] == label]


def build_attention_index(model, reviews: Sequence[Review], split: str = "test") -> AttentionIndex:
    """Forward every review in eval mode and keep 0.5 * (alpha_G + alpha_D) per aspect."""
    if not reviews:
        raise ValueError("cannot index an empty split")
    _, traces = model.predict(reviews)
    K = model.config.num_aspects
    tokens = [t.tokens for t in traces]
    pos = [None if r.pos_tags is None else tuple(r.pos_tags[: len(t.tokens)]) for r, t in zip(reviews, traces)]
    return AttentionIndex(
        review_ids=[r.id for r in reviews],
        tokens=tokens,
        pos_tags=pos,
        labels=np.array([r.aspect_labels for r in reviews], dtype=np.int64),
        weights=[[t.accumulated(k) for k in range(K)] for t in traces],
        split=split,
        deliberation=model.config.use_deliberation,
    )


def _scores_over(index: AttentionIndex, rows: Sequence[int], k: int, gamma: float) -> dict[str, float]:
    mass: dict[str, float] = defaultdict(float)
    freq: Counter = Counter()
    for i in rows:
        toks, alpha = index.tokens[i], index.weights[i][k]
        for t, a in zip(toks, alpha):
            mass[t] += float(a)
        freq.update(toks)
    return {w: m / (freq[w] + gamma) for w, m in mass.items()}


def aspect_keyword_scores(index: AttentionIndex, k: int, gamma: float = DEFAULT_GAMMA) -> dict[str, float]:
    """Corpus-level word significance for aspect ``k``; words absent from the corpus score 0."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return _scores_over(index, range(len(index)), k, gamma)


def opinion_keyword_scores(index: AttentionIndex, k: int, label: int,
                           gamma: float = DEFAULT_GAMMA) -> dict[str, float]:
    """Same score restricted to reviews whose gold label for ``k`` is ``label``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    rows = index.rows_with_label(k, label)
    if not rows:
        raise KeywordError(f"no reviews with label {label} for aspect {k}")
    return _scores_over(index, rows, k, gamma)


def word_pos(index: AttentionIndex) -> dict[str, str]:
    """Majority tag per word type; ties go to the tag that is rarer corpus-wide."""
    per_word: dict[str, Counter] = defaultdict(Counter)
    overall: Counter = Counter()
    for toks, tags in zip(index.tokens, index.pos_tags):
        if tags is None:
            continue
        for t, g in zip(toks, tags):
            per_word[t][g] += 1
            overall[g] += 1
    return {w: min(c, key=lambda g: (-c[g], overall[g], g)) for w, c in per_word.items()}


@dataclass(frozen=True)
class KeywordEntry:
    word: str
    score: float
    pos: str | None


def rank_keywords(scores: dict[str, float], pos_of: dict[str, str] | None, mode: str = "aspect",
                  top_k: int = DEFAULT_TOP_K) -> list[KeywordEntry]:
    """Filter by POS for ``mode``, sort by score then word, keep ``top_k``.

    ``pos_of=None`` skips the filter.
    """
    if mode not in ("aspect", "opinion"):
        raise ValueError(f"mode must be 'aspect' or 'opinion', got {mode!r}")
    allowed = ASPECT_TAGS if mode == "aspect" else OPINION_TAGS
    items = []
    for w, s in scores.items():
        tag = None if pos_of is None else pos_of.get(w)
        if pos_of is not None and tag not in allowed:
            continue
        items.append(KeywordEntry(w, s, tag))
    items.sort(key=lambda e: (-e.score, e.word))
    return items[:top_k]


@dataclass
class KeywordTable:
    mode: str
    gamma: float
    top_k: int
    split: str
    pos_filtered: bool
    aspect_names: list[str]
    entries: dict[tuple[int, int | None], list[KeywordEntry]]

    def words(self, k: int, label: int | None = None) -> list[str]:
        return [e.word for e in self.entries[(k, label)]]

    def records(self, rating_min: int = 1) -> list[dict]:
        rows = []
        for (k, label), entries in sorted(self.entries.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
            for rank, e in enumerate(entries, 1):
                rec = {
                    "aspect": self.aspect_names[k],
                    "rank": rank,
                    "word": e.word,
                    "score": sig(e.score),
                    "pos": e.pos,
                    "gamma": self.gamma,
                    "split": self.split,
                }
                if label is not None:
                    rec["label"] = label + rating_min
                rows.append(rec)
        return rows


def keyword_table(index: AttentionIndex, mode: str = "aspect", gamma: float = DEFAULT_GAMMA,
                  top_k: int = DEFAULT_TOP_K, aspect_names: Sequence[str] | None = None,
                  num_classes: int | None = None, aspects: Sequence[int] | None = None) -> KeywordTable:
    """Rank keywords for every aspect (and every label present, in opinion mode)."""
    K = index.num_aspects
    names = list(aspect_names or [f"aspect{k}" for k in range(K)])
    pos_of = word_pos(index) if index.has_pos else None
    if pos_of is None:
        logger.warning("corpus has no POS tags; keyword ranking is unfiltered")
    entries: dict[tuple[int, int | None], list[KeywordEntry]] = {}
    for k in aspects if aspects is not None else range(K):
        if mode == "aspect":
            entries[(k, None)] = rank_keywords(aspect_keyword_scores(index, k, gamma), pos_of, mode, top_k)
        else:
            labels = range(num_classes) if num_classes else sorted(set(index.labels[:, k].tolist()))
            for y in labels:
                if not index.rows_with_label(k, y):
                    continue
                scores = opinion_keyword_scores(index, k, y, gamma)
                entries[(k, y)] = rank_keywords(scores, pos_of, mode, top_k)
    return KeywordTable(mode, gamma, top_k, index.split, pos_of is not None, names, entries)


def brute_force_oracle(tokens: Sequence[Sequence[str]], weights: Sequence[Sequence[float]],
                       gamma: float = DEFAULT_GAMMA) -> dict[str, float]:
    """Literal loop over vocabulary, reviews and tokens; reference for the fast scorer.

    ``weights[i]`` holds one aspect's accumulated attention for review ``i``.
    """
    vocabulary = sorted({t for toks in tokens for t in toks})
    scores = {}
    for w in vocabulary:
        denominator = gamma
        for toks in tokens:
            for t in toks:
                if t == w:
                    denominator += 1
        total = 0.0
        for toks, alpha in zip(tokens, weights):
            numerator = 0.0
            for t, a in zip(toks, alpha):
                if t == w:
                    numerator += a
            total += numerator / denominator
        scores[w] = total
    return scores
