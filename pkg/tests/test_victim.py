import json
import math

import numpy as np
import pytest

from tokenpgd.core import TokenSequence, Vocabulary, apply_perturbation, mixture_embedding, one_hot_choices
from tokenpgd.objective import cw_loss
from tokenpgd.victim import (LinearBagModel, MlpModel, TableFluencyScorer, UniformScorer,
                             grad_check, load_model, model_from_dict, save_model,
                             table_fluency_scorer, unigram_surprisal)

from conftest import make_instance


@pytest.fixture
def vocab():
    return Vocabulary(np.random.default_rng(3).normal(size=(25, 5)))


def test_grad_check_linear(vocab, rng):
    model = LinearBagModel.random(vocab, 3, rng)
    rep = grad_check(model, vocab.embeddings[:7], 1e-8)
    assert rep.passed and rep.max_rel_error <= 1e-8


def test_grad_check_mlp(vocab, rng):
    model = MlpModel.random(vocab, 3, rng, hidden=8)
    rep = grad_check(model, vocab.embeddings[:7], 1e-5, step=1e-5)
    assert rep.passed


def test_grad_check_catches_scaled_backward(vocab, rng):
    model = MlpModel.random(vocab, 3, rng, hidden=8)
    bad = lambda emb, g: 1.01 * model.backward(emb, g)  # noqa: E731
    assert not grad_check(model, vocab.embeddings[:7], 1e-5, backward=bad).passed
    lin = LinearBagModel.random(vocab, 2, rng)
    bad = lambda emb, g: 1.01 * lin.backward(emb, g)  # noqa: E731
    assert not grad_check(lin, vocab.embeddings[:7], 1e-8, backward=bad).passed


def test_grad_check_size_guard(vocab, rng):
    model = LinearBagModel.random(vocab, 2, rng)
    with pytest.raises(ValueError):
        grad_check(model, np.zeros((2001, 5)), 1e-8)


def test_linear_logits_exact(vocab, rng):
    model = LinearBagModel.random(vocab, 2, rng)
    emb = vocab.embeddings[[1, 2, 3]]
    expected = emb.mean(axis=0) @ model.params["weight"] + model.params["bias"]
    assert np.array_equal(model.forward(emb), expected)


def test_batched_forward_backward_shapes(vocab, rng):
    model = MlpModel.random(vocab, 4, rng, hidden=6)
    emb = vocab.embeddings[rng.integers(0, 25, size=(3, 2, 7))]
    assert model.forward(emb).shape == (3, 2, 4)
    g = model.backward(emb, np.ones((3, 2, 4)))
    assert g.shape == emb.shape
    assert np.allclose(g[1, 0], model.backward(emb[1, 0], np.ones(4)))


@pytest.mark.parametrize("cls", [LinearBagModel, MlpModel])
def test_param_gradients_match_finite_differences(vocab, rng, cls):
    model = cls.random(vocab, 3, rng)
    pooled = rng.normal(size=(4, 5))
    c = rng.normal(size=(4, 3))
    _, grads = model.head_backward(pooled, c)
    h = 1e-6
    for name, arr in model.params.items():
        for idx in list(np.ndindex(arr.shape))[:6]:
            orig = arr[idx]
            arr[idx] = orig + h
            up = float(np.sum(model.head(pooled) * c))
            arr[idx] = orig - h
            dn = float(np.sum(model.head(pooled) * c))
            arr[idx] = orig
            assert (up - dn) / (2 * h) == pytest.approx(grads[name][idx], rel=1e-5, abs=1e-8)


def test_boolean_mixture_forward_equals_discrete(vocab, rng):
    model = MlpModel.random(vocab, 2, rng)
    seq, cands = make_instance([0, 1, 2, 3], [[5, 6], [7], [], [8, 9]])
    z = np.array([True, False, False, True])
    choice = [1, -1, -1, 0]
    pert = apply_perturbation(seq, cands, z, choice)
    mix = mixture_embedding(vocab, seq, cands, z.astype(float), one_hot_choices(cands, z, choice))
    assert np.array_equal(model.forward(mix), model.logits_for(np.array(pert.adv_tokens)))


def test_logit_scaling_keeps_success_indicator(vocab, rng):
    model = LinearBagModel.random(vocab, 3, rng)
    scaled = LinearBagModel(vocab, 7.5 * model.params["weight"], 7.5 * model.params["bias"])
    for _ in range(100):
        toks = rng.integers(0, 25, size=5)
        for t0 in range(3):
            assert (cw_loss(model.logits_for(toks), t0) == 0) == (cw_loss(scaled.logits_for(toks), t0) == 0)


@pytest.mark.parametrize("cls", [LinearBagModel, MlpModel])
def test_checkpoint_roundtrip(tmp_path, vocab, rng, cls):
    model = cls.random(vocab, 3, rng)
    path = tmp_path / "m.json"
    save_model(model, path)
    loaded = load_model(path)
    assert type(loaded) is cls
    assert np.array_equal(loaded.vocab.embeddings, vocab.embeddings)
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    doc = json.loads(path.read_text())
    assert doc["format"] == "tokenpgd-victim" and doc["version"] == 1


def test_checkpoint_rejects_wrong_format(vocab, rng):
    doc = LinearBagModel.random(vocab, 2, rng).to_dict()
    doc["version"] = 99
    with pytest.raises(ValueError):
        model_from_dict(doc)
    doc = LinearBagModel.random(vocab, 2, rng).to_dict()
    doc["kind"] = "transformer"
    with pytest.raises(ValueError):
        model_from_dict(doc)


def test_copy_is_independent(vocab, rng):
    model = MlpModel.random(vocab, 2, rng)
    other = model.copy()
    other.params["w1"] += 1.0
    assert not np.array_equal(other.params["w1"], model.params["w1"])


def test_inconsistent_shapes_rejected(vocab):
    with pytest.raises(ValueError):
        LinearBagModel(vocab, np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        MlpModel(vocab, np.zeros((5, 3)), np.zeros(3), np.zeros((4, 2)), np.zeros(2))


def test_unigram_half_frequency_costs_ln2():
    scorer = unigram_surprisal([TokenSequence([0, 0, 1, 2])], 4)
    seq = TokenSequence([0])
    assert scorer.score(seq, 0, 0) == pytest.approx(math.log(2), abs=1e-15)
    assert scorer.score(seq, 0, 3) == math.inf


def test_table_scorer_missing_entries_are_infinite():
    scorer = table_fluency_scorer([1.0, np.nan])
    seq = TokenSequence([0])
    assert scorer.score(seq, 0, 1) == math.inf
    assert scorer.score(seq, 0, 7) == math.inf  # outside the table
    assert scorer.to_list() == [[1.0, None]]


def test_table_scorer_positional_rows():
    scorer = TableFluencyScorer([[1.0, 2.0], [3.0, 4.0]])
    seq = TokenSequence([0, 1, 1])
    assert list(scorer.site_scores(seq)) == [1.0, 4.0, 4.0]


def test_uniform_scorer_zero_regularizer():
    from tokenpgd.objective import fluency_reg
    seq, cands = make_instance([0, 1], [[2, 3], [4]])
    sc = UniformScorer()
    val = fluency_reg(np.array([0.7, 0.4]), [np.array([0.5, 0.5]), np.array([1.0])],
                      sc.site_scores(seq), sc.candidate_scores(seq, cands))
    assert val == 0.0
