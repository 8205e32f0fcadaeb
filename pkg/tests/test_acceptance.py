"""End-to-end acceptance checks, one test per criterion.

The session summary prints one PASS/FAIL line per criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest

from fedar import autograd as ag
from fedar.akr import (aspect_keyword_scores, brute_force_oracle, build_attention_index,
                       keyword_table, opinion_keyword_scores, AttentionIndex)
from fedar.corpus import (Review, SyntheticSpec, build_vocabulary, generate_synthetic_corpus,
                          random_embeddings, split_dataset)
from fedar.lead import (AudienceSpec, aggregate_uncertainty, audience_uncertainty, baseline_scores,
                        lead_report, rank_and_select, spawn_audiences, triage_error_rate)
from fedar.model import (Fedar, ModelConfig, deliberate_attention, factorize, global_attention,
                         make_batch, save_checkpoint)
from fedar.presets import corrupt_labels, desk_model_config, desk_train_config, planted_spec
from fedar.training import TrainConfig, clip_gradients, global_norm, schedule_lr, train

SEED = 42


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_check():
    spec = SyntheticSpec.from_dict(dict(
        aspects=2, classes=3, reviews_per_cell=1, length_range=[2, 6], noise_rate=0.3,
        keywords=[[["a0", "a1"], ["b0", "b1"], ["c0", "c1"]], [["d0", "d1"], ["e0", "e1"], ["f0", "f1"]]],
        noise_vocab=["n1", "n2", "n3"]))
    corpus = generate_synthetic_corpus(spec, SEED)
    vocab = build_vocabulary(corpus)
    cfg = ModelConfig(num_aspects=2, num_classes=3, d_emb=8, d_hidden=8, encoder_layers=1, fm_factor_dim=2)
    assert cfg.use_overall_rating and cfg.use_deliberation and cfg.use_feature_enrichment
    model = Fedar(cfg, random_embeddings(vocab, 8, SEED).matrix, vocab=vocab, seed=SEED, dtype=np.float64)
    batch = make_batch(corpus.reviews[:2], vocab, 3)
    assert len(batch) == 2 and batch.ids.shape[1] <= 12
    rng = np.random.default_rng(SEED)
    masks = [ag.dropout_mask((2, cfg.classifier_width), cfg.dropout_rate, rng, np.float64) for _ in range(2)]

    start = time.perf_counter()
    err = ag.finite_difference_check(lambda: model.loss(batch, train=True, dropout_masks=masks)[0],
                                     list(model.params.values()))
    elapsed = time.perf_counter() - start
    print(f"max rel err {err:.3e} in {elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- 2


def test_criterion_02_lead_point_values():
    probs = np.array([[[0.1, 0.9]], [[0.8, 0.2]], [[0.5, 0.5]]])
    psi = audience_uncertainty(probs, np.zeros((3, 1), dtype=int))[:, 0]
    assert psi == pytest.approx([2.30, 0.22, 0.69], abs=0.005)
    assert abs(aggregate_uncertainty(np.array([[1.0, 2.0]]), lam=1, eta=1, zeta=1) - 7.0) < 1e-9


# ---------------------------------------------------------------- 3


def test_criterion_03_normalization():
    rng = np.random.default_rng(SEED)
    for _ in range(1000):
        B, T, D, A = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 5)
        scale = rng.uniform(0.1, 10)
        H = ag.Tensor(rng.normal(0, scale, (B, T, D)))
        lengths = rng.integers(1, T + 1, size=B)
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(float)
        a_g, s_g = global_attention(H, mask, ag.Tensor(rng.normal(0, scale, (D, A))),
                                    ag.Tensor(rng.normal(0, 1, A)), ag.Tensor(rng.normal(0, scale, A)))
        a_d, _ = deliberate_attention(H, mask, s_g, ag.Tensor(rng.normal(0, scale, (D, D))),
                                      ag.Tensor(rng.normal(0, 1, D)))
        y = ag.softmax(ag.Tensor(rng.normal(0, scale, (B, rng.integers(2, 6)))))
        for dist in (a_g.data, a_d.data, y.data):
            assert np.all(dist >= 0)
            assert np.allclose(dist.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(a_g.data[mask == 0] == 0)


# ---------------------------------------------------------------- 4


def _fm_naive(z, w0, w, V):
    n = len(z)
    total = w0 + sum(w[i] * z[i] for i in range(n))
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.dot(V[i], V[j])) * z[i] * z[j]
    return total


def test_criterion_04_fm_equivalence():
    rng = np.random.default_rng(SEED)
    for _ in range(100):
        n, F = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        z, w0, w, V = rng.normal(size=n), rng.normal(size=1), rng.normal(size=n), rng.normal(size=(n, F))
        fast = factorize(ag.Tensor(z[None, :]), ag.Tensor(w0), ag.Tensor(w), ag.Tensor(V)).data[0, 0]
        assert abs(fast - _fm_naive(z, w0[0], w, V)) < 1e-10


# ---------------------------------------------------------------- 5


def _random_index(rng, n_reviews, K=2, N=3):
    words = [f"t{i}" for i in range(int(rng.integers(1, 12)))]
    tokens, weights = [], []
    for _ in range(n_reviews):
        T = int(rng.integers(1, 15))
        tokens.append(tuple(rng.choice(words, size=T)))
        weights.append([rng.dirichlet(np.ones(T)) for _ in range(K)])
    labels = rng.integers(0, N, size=(n_reviews, K))
    return AttentionIndex([f"r{i}" for i in range(n_reviews)], tokens, [None] * n_reviews, labels, weights)


def test_criterion_05_akr_oracle():
    rng = np.random.default_rng(SEED)
    for _ in range(50):
        index = _random_index(rng, int(rng.integers(1, 21)))
        gamma = float(rng.uniform(0.1, 3))
        for k in range(2):
            fast = aspect_keyword_scores(index, k, gamma)
            slow = brute_force_oracle(index.tokens, [w[k] for w in index.weights], gamma)
            assert fast.keys() == slow.keys()
            assert all(abs(fast[w] - slow[w]) < 1e-12 for w in slow)
            for y in sorted(set(index.labels[:, k].tolist())):
                rows = index.rows_with_label(k, y)
                fast = opinion_keyword_scores(index, k, y, gamma)
                slow = brute_force_oracle([index.tokens[i] for i in rows], [index.weights[i][k] for i in rows], gamma)
                assert fast.keys() == slow.keys()
                assert all(abs(fast[w] - slow[w]) < 1e-12 for w in slow)

    third = np.full(3, 1 / 3)
    hand = AttentionIndex(["r"], [("good", "beer", "good")], [None], np.zeros((1, 1), dtype=int), [[third]])
    assert aspect_keyword_scores(hand, 0, 1.0)["good"] == pytest.approx(2 / 9, abs=1e-15)


# ---------------------------------------------------------------- shared synthetic run


@pytest.fixture(scope="module")
def synthetic_run():
    spec = planted_spec()
    corpus = split_dataset(generate_synthetic_corpus(spec, SEED), (0.8, 0.1, 0.1), SEED)
    start = time.process_time()
    result = train(corpus, desk_model_config(), desk_train_config(SEED))
    elapsed = time.process_time() - start
    return spec, corpus, result, elapsed


@pytest.mark.slow
def test_criterion_06_synthetic_end_to_end(synthetic_run):
    spec, corpus, result, elapsed = synthetic_run
    assert [len(corpus.split(s)) for s in ("train", "dev", "test")] == [2000, 250, 250]
    assert len(result.history) <= 10
    table = keyword_table(build_attention_index(result.model, corpus.split("test")), "aspect", top_k=10)
    missing = {spec.aspects[k]: sorted({w for ws in spec.keywords[k] for w in ws} - set(table.words(k)))
               for k in range(2)}
    print(f"dev ACC {result.best_dev_accuracy:.4f}, cpu {elapsed:.1f}s")
    for k in range(2):
        print(f"  top-10 {spec.aspects[k]}: {table.words(k)}")
    print(f"  planted keywords missing from top-10: {missing}")
    assert result.best_dev_accuracy >= 0.90
    assert elapsed < 600
    assert not any(missing.values())


@pytest.mark.slow
def test_criterion_07_ablation_ordering(synthetic_run):
    _, corpus, result, _ = synthetic_run
    full = result.best_dev_accuracy
    variants = {}
    for switch in ("use_overall_rating", "use_deliberation", "use_feature_enrichment"):
        res = train(corpus, desk_model_config(**{switch: False}), desk_train_config(SEED))
        variants[switch] = res.best_dev_accuracy
    print(f"full {full:.4f}, variants {variants}")
    for acc in variants.values():
        assert full >= acc - 0.02


@pytest.mark.slow
def test_criterion_08_uncertainty_triage(synthetic_run):
    spec, corpus, result, _ = synthetic_run
    model = result.model
    test = corpus.split("test")
    noisy = corrupt_labels(test, 0.15, spec.classes, SEED)
    ids = [r.id for r in test]
    pred = np.argmax(model.predict_proba(test), axis=-1)
    predictions = dict(zip(ids, pred))
    gold = {r.id: r.aspect_labels for r in noisy}

    overall = triage_error_rate(ids, predictions, gold)
    lead = lead_report(model, spawn_audiences(model, AudienceSpec(seed=SEED)), test)
    lead_err = triage_error_rate(rank_and_select(ids, lead.log_score, 0.1), predictions, gold)
    mm = baseline_scores("max-margin", model, test)
    mm_err = triage_error_rate(rank_and_select(ids, mm.log_score, 0.1), predictions, gold)
    print(f"overall {overall:.4f}, LEAD top-10% {lead_err:.4f} ({lead_err / overall:.2f}x), "
          f"max-margin top-10% {mm_err:.4f}")
    assert lead_err >= 1.5 * overall
    assert lead_err >= mm_err


# ---------------------------------------------------------------- 9


def test_criterion_09_schedule_and_clipping():
    cfg = TrainConfig()
    assert schedule_lr(0, cfg) == 0.0005
    assert schedule_lr(2, cfg) == 0.0004
    assert schedule_lr(5, cfg) == 0.00032
    rng = np.random.default_rng(SEED)
    grads = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    factor = 4.0 / global_norm(grads)
    grads = {n: g * factor for n, g in grads.items()}
    assert global_norm(grads) == pytest.approx(4.0, abs=1e-12)
    assert abs(global_norm(clip_gradients(grads, 2.0)) - 2.0) < 1e-9


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(tmp_path):
    corpus = split_dataset(generate_synthetic_corpus(planted_spec(300), SEED), (0.8, 0.1, 0.1), SEED)
    runs = []
    for i in range(2):
        res = train(corpus, desk_model_config(), desk_train_config(SEED, max_epochs=3))
        save_checkpoint(res.model, tmp_path / f"run{i}", SEED)
        runs.append(res)
    curve = [[r.train_loss for r in res.history] for res in runs]
    assert np.allclose(curve[0], curve[1], rtol=0, atol=1e-6)
    for name in ("manifest.json", "tensors.bin", "vocab.json"):
        assert (tmp_path / "run0" / name).read_bytes() == (tmp_path / "run1" / name).read_bytes()
