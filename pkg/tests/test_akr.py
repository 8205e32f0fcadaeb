import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedar.akr import (AttentionIndex, KeywordError, aspect_keyword_scores, brute_force_oracle,
                       build_attention_index, keyword_table, opinion_keyword_scores, rank_keywords, word_pos)
from fedar.corpus import Review, build_vocabulary, random_embeddings
from fedar.model import Fedar, ModelConfig


def make_index(tokens, weights, labels=None, pos=None):
    n = len(tokens)
    return AttentionIndex(
        review_ids=[str(i) for i in range(n)],
        tokens=[tuple(t) for t in tokens],
        pos_tags=pos if pos is not None else [None] * n,
        labels=np.asarray(labels if labels is not None else [[0]] * n),
        weights=[[np.asarray(w, dtype=float) for w in ws] for ws in weights],
    )


def test_single_token_review():
    index = make_index([["great"]], [[[1.0]]])
    assert aspect_keyword_scores(index, 0, gamma=1.0) == {"great": pytest.approx(0.5)}
    assert aspect_keyword_scores(index, 0, gamma=3.0)["great"] == pytest.approx(0.25)


def test_hand_example():
    index = make_index([["a", "b"], ["a", "a", "c"]], [[[0.6, 0.4]], [[0.2, 0.3, 0.5]]])
    scores = aspect_keyword_scores(index, 0, gamma=1.0)
    assert scores["a"] == pytest.approx(1.1 / 4)
    assert scores["b"] == pytest.approx(0.2)
    assert scores["c"] == pytest.approx(0.25)


def test_huge_gamma_flattens_scores():
    index = make_index([["a", "b", "a"]], [[[0.3, 0.3, 0.4]]])
    assert all(s < 1e-11 for s in aspect_keyword_scores(index, 0, gamma=1e12).values())


def test_gamma_must_be_positive():
    index = make_index([["a"]], [[[1.0]]])
    with pytest.raises(ValueError):
        aspect_keyword_scores(index, 0, gamma=0)


@st.composite
def indexes(draw):
    n = draw(st.integers(1, 6))
    tokens, weights = [], []
    for _ in range(n):
        T = draw(st.integers(1, 5))
        tokens.append([draw(st.sampled_from("abcde")) for _ in range(T)])
        raw = np.array(draw(st.lists(st.floats(0.01, 1.0), min_size=T, max_size=T)))
        weights.append([raw / raw.sum()])
    labels = [[draw(st.integers(0, 1))] for _ in range(n)]
    return tokens, weights, labels


@settings(max_examples=100, deadline=None)
@given(indexes(), st.floats(0.1, 10.0))
def test_fast_scores_match_oracle(data, gamma):
    tokens, weights, labels = data
    index = make_index(tokens, weights, labels)
    fast = aspect_keyword_scores(index, 0, gamma)
    slow = brute_force_oracle(tokens, [w[0] for w in weights], gamma)
    assert set(fast) == set(slow)
    for w in fast:
        assert fast[w] == pytest.approx(slow[w], abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(indexes())
def test_scores_fall_as_gamma_grows(data):
    index = make_index(*data)
    small, large = aspect_keyword_scores(index, 0, 0.5), aspect_keyword_scores(index, 0, 5.0)
    assert all(large[w] <= small[w] for w in small)


@settings(max_examples=50, deadline=None)
@given(indexes(), st.floats(0.1, 10.0))
def test_label_partition_sums_numerators(data, gamma):
    tokens, weights, labels = data
    index = make_index(tokens, weights, labels)
    total = aspect_keyword_scores(index, 0, gamma)
    mass = {w: 0.0 for w in total}
    for y in (0, 1):
        rows = index.rows_with_label(0, y)
        if not rows:
            continue
        part = opinion_keyword_scores(index, 0, y, gamma)
        for w, s in part.items():
            freq = sum(index.tokens[i].count(w) for i in rows)
            mass[w] += s * (freq + gamma)
    for w, s in total.items():
        freq = sum(t.count(w) for t in index.tokens)
        assert mass[w] == pytest.approx(s * (freq + gamma), abs=1e-12)


def test_empty_label_raises():
    index = make_index([["a"]], [[[1.0]]], labels=[[0]])
    with pytest.raises(KeywordError, match="label 1"):
        opinion_keyword_scores(index, 0, 1)


def test_pos_majority_and_ties():
    index = make_index(
        [["run", "run", "fast"], ["run", "cat"], ["cat"]],
        [[[1 / 3] * 3], [[0.5, 0.5]], [[1.0]]],
        pos=[("VERB", "VERB", "ADV"), ("NOUN", "NOUN"), ("ADJ",)],
    )
    tags = word_pos(index)
    assert tags["run"] == "VERB"
    # cat is NOUN once and ADJ once; ADJ is rarer overall
    assert tags["cat"] == "ADJ"


def test_rank_filters_and_breaks_ties():
    scores = {"b": 0.5, "a": 0.5, "c": 0.9, "d": 0.1}
    pos = {"a": "NOUN", "b": "NOUN", "c": "ADJ", "d": "PROPN"}
    assert [e.word for e in rank_keywords(scores, pos, "aspect")] == ["a", "b", "d"]
    assert [e.word for e in rank_keywords(scores, pos, "opinion")] == ["c"]
    assert [e.word for e in rank_keywords(scores, None, "aspect", top_k=2)] == ["c", "a"]
    with pytest.raises(ValueError):
        rank_keywords(scores, pos, "sentiment")


def test_table_records():
    index = make_index([["a", "b"], ["b"]], [[[0.7, 0.3], [0.5, 0.5]], [[1.0], [1.0]]],
                       labels=[[0, 1], [1, 1]])
    table = keyword_table(index, "opinion", aspect_names=["look", "taste"], num_classes=2)
    assert not table.pos_filtered
    assert set(table.entries) == {(0, 0), (0, 1), (1, 1)}
    recs = table.records(rating_min=1)
    assert recs[0] == {"aspect": "look", "rank": 1, "word": "a", "score": pytest.approx(0.35),
                       "pos": None, "gamma": 1.0, "split": "test", "label": 1}
    aspect = keyword_table(index, "aspect", top_k=1)
    assert aspect.words(0) == ["b"] and "label" not in aspect.records()[0]


def test_index_from_model_sums_to_one():
    reviews = [Review("r1", ("x", "y", "z"), (0,), pos_tags=("NOUN", "ADJ", "NOUN")),
               Review("r2", ("y",), (1,), pos_tags=("ADJ",))]
    vocab = build_vocabulary(reviews)
    cfg = ModelConfig(num_aspects=1, num_classes=2, d_emb=3, d_hidden=2, encoder_layers=1, fm_factor_dim=2, d_or=2)
    model = Fedar(cfg, random_embeddings(vocab, 3).matrix, vocab=vocab)
    index = build_attention_index(model, reviews, split="dev")
    assert index.has_pos and index.split == "dev"
    for w in index.weights:
        assert abs(w[0].sum() - 1) < 1e-6
    table = keyword_table(index, "aspect")
    assert set(table.words(0)) == {"x", "z"}
    with pytest.raises(ValueError):
        build_attention_index(model, [])
