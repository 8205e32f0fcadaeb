import json

import numpy as np
import pytest

from fedar import autograd as ag
from fedar.corpus import Review, build_vocabulary, random_embeddings
from fedar.model import (CheckpointError, Fedar, ModelConfig, deliberate_attention, factorize,
                         global_attention, highway_embed, load_checkpoint, lstm_direction, make_batch,
                         parameter_shapes, predict_labels, reversal_permutation, save_checkpoint)

REVIEWS = [
    Review("a", ("good", "beer", "nice", "head"), (1, 0), overall_rating=1),
    Review("b", ("bad", "beer"), (0, 1)),
    Review("c", ("nice",), (1, 1), overall_rating=0),
]


def tiny(**switches):
    cfg = ModelConfig(num_aspects=2, num_classes=2, d_emb=4, d_hidden=3, encoder_layers=2,
                      fm_factor_dim=2, d_or=2, **switches)
    vocab = build_vocabulary(REVIEWS)
    emb = random_embeddings(vocab, 4, seed=1).matrix
    return Fedar(cfg, emb, vocab=vocab, seed=7, dtype=np.float64)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_forward_shapes():
    model = tiny()
    batch = make_batch(REVIEWS, model.vocab, 2)
    out = model.forward(batch)
    D = model.config.state_width
    assert D == 2 * (3 + 3)
    assert out.hidden.shape == (3, 4, D)
    for k in range(2):
        assert out.alpha_g[k].shape == (3, 4)
        assert out.s_g[k].shape == (3, D)
        assert out.s[k].shape == (3, D + 2)
        np.testing.assert_allclose(out.probs[k].data.sum(-1), 1.0, atol=1e-12)


def test_highway_matches_formula(rng):
    E, Wf, Wg = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    bf, bg = rng.normal(size=4), rng.normal(size=4)
    got = highway_embed(*(ag.Tensor(a) for a in (E, Wf, bf, Wg, bg))).data
    g = sigmoid(E @ Wg + bg)
    np.testing.assert_allclose(got, np.maximum(E @ Wf + bf, 0) * g + E * (1 - g), atol=1e-12)


def test_lstm_matches_loop_reference(rng):
    B, T, d, H = 2, 5, 3, 4
    x, Wx, Wh, b = rng.normal(size=(B, T, d)), rng.normal(size=(d, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    got = lstm_direction(ag.Tensor(x), ag.Tensor(Wx), ag.Tensor(Wh), ag.Tensor(b)).data
    for i in range(B):
        h, c = np.zeros(H), np.zeros(H)
        for t in range(T):
            z = x[i, t] @ Wx + h @ Wh + b
            ig, fg, og, cand = sigmoid(z[:H]), sigmoid(z[H:2 * H]), sigmoid(z[2 * H:3 * H]), np.tanh(z[3 * H:])
            c = fg * c + ig * cand
            h = og * np.tanh(c)
            np.testing.assert_allclose(got[i, t], h, atol=1e-12)


def test_reversal_permutation():
    perm = reversal_permutation(np.array([3, 1]), 4)
    np.testing.assert_array_equal(perm, [[2, 1, 0, 3], [0, 1, 2, 3]])


def test_padding_does_not_change_real_outputs():
    model = tiny()
    alone = model.predict_proba(REVIEWS[1:2])
    batched = model.predict_proba(REVIEWS)
    np.testing.assert_allclose(alone[0], batched[1], atol=1e-12)
    _, traces = model.predict(REVIEWS)
    for t in traces:
        for k in range(2):
            assert t.alpha_g[k].shape == (len(t.tokens),)
            assert abs(t.alpha_g[k].sum() - 1) < 1e-12


def test_factorize_matches_double_loop(rng):
    z, w, V, w0 = rng.normal(size=(5,)), rng.normal(size=5), rng.normal(size=(5, 3)), rng.normal(size=1)
    got = factorize(ag.Tensor(z[None]), ag.Tensor(w0), ag.Tensor(w), ag.Tensor(V)).data[0, 0]
    naive = w0[0] + z @ w + sum(V[i] @ V[j] * z[i] * z[j] for i in range(5) for j in range(i + 1, 5))
    assert got == pytest.approx(naive, abs=1e-10)


def test_factorize_rejects_wrong_width(rng):
    with pytest.raises(ag.ShapeError):
        factorize(ag.Tensor(rng.normal(size=(1, 4))), ag.Tensor(np.zeros(1)), ag.Tensor(np.zeros(5)),
                  ag.Tensor(np.zeros((5, 2))))


def test_enrichment_appends_max_and_mean():
    model = tiny()
    H = model.forward(make_batch(REVIEWS, model.vocab, 2)).hidden.data
    half = H.shape[-1] // 2
    for part in (H[..., :half], H[..., half:]):
        np.testing.assert_allclose(part[..., 3], part[..., :3].max(-1), atol=1e-12)
        np.testing.assert_allclose(part[..., 4], part[..., :3].mean(-1), atol=1e-12)


def test_attention_ignores_padding(rng):
    H = rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    alpha, s = global_attention(ag.Tensor(H), mask, ag.Tensor(rng.normal(size=(3, 2))),
                                ag.Tensor(np.zeros(2)), ag.Tensor(rng.normal(size=2)))
    assert np.all(alpha.data[1, 2:] == 0)
    np.testing.assert_allclose(alpha.data.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(s.data[1], alpha.data[1, :2] @ H[1, :2], atol=1e-12)
    W_D = ag.Tensor(rng.normal(size=(3, 3)))
    H2 = H.copy()
    H2[1, 2:] = 99.0
    beta, _ = deliberate_attention(ag.Tensor(H), mask, s, W_D, ag.Tensor(np.zeros(3)))
    beta2, _ = deliberate_attention(ag.Tensor(H2), mask, s, W_D, ag.Tensor(np.zeros(3)))
    assert np.all(beta2.data[1, 2:] == 0)
    np.testing.assert_allclose(beta.data, beta2.data, atol=1e-12)


@pytest.mark.parametrize("switch, missing", [
    ("use_overall_rating", "overall.E"),
    ("use_deliberation", "aspect0.W_D"),
    ("use_feature_enrichment", "fm.fwd.V"),
])
def test_switches_drop_parameters(switch, missing):
    full = ModelConfig(num_aspects=1, num_classes=2, d_hidden=4, d_emb=4)
    off = ModelConfig(num_aspects=1, num_classes=2, d_hidden=4, d_emb=4, **{switch: False})
    assert missing in parameter_shapes(full) and missing not in parameter_shapes(off)


def test_switched_off_model_runs():
    model = tiny(use_overall_rating=False, use_deliberation=False, use_feature_enrichment=False)
    _, traces = model.predict(REVIEWS)
    assert traces[0].alpha_d[0] is None
    np.testing.assert_array_equal(traces[0].accumulated(0), traces[0].alpha_g[0])
    assert traces[0].hidden.shape[-1] == 6


def test_accumulated_is_average():
    _, traces = tiny().predict(REVIEWS)
    t = traces[0]
    np.testing.assert_allclose(t.accumulated(1), 0.5 * (t.alpha_g[1] + t.alpha_d[1]))


def test_predict_labels_ties_go_low():
    np.testing.assert_array_equal(predict_labels([[0.5, 0.5], [0.2, 0.8]]), [0, 1])


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError, match="colour"):
        ModelConfig.from_dict({"num_aspects": 1, "num_classes": 2, "colour": 1})
    with pytest.raises(ValueError):
        ModelConfig(num_aspects=0, num_classes=2)
    with pytest.raises(ValueError):
        ModelConfig(num_aspects=1, num_classes=2, dropout_rate=1.0)


def test_checkpoint_round_trip(tmp_path):
    model = tiny().astype(np.float32)
    save_checkpoint(model, tmp_path / "ck", seed=7, extra={"note": 1})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["extra"] == {"note": 1} and manifest["seed"] == 7
    assert back.vocab == model.vocab and back.config == model.config
    for name, p in model.params.items():
        np.testing.assert_array_equal(back.params[name].data, p.data)
    np.testing.assert_array_equal(back.predict_proba(REVIEWS), model.predict_proba(REVIEWS))


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(tiny(), tmp_path, seed=1)
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(tiny(), tmp_path, seed=1)
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["config"]["d_hidden"] = 5
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none")
