import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from phaselab.data.conllu import DepAnnotatedText, Sentence
from phaselab.metrics import (BreakthroughConfig, ICLConfig, MetricError, MetricSeries, detect_breakthrough,
                              head_sas_score, icl_score, prefix_matching_score, uas, word_level_attention)

SEEDS = range(50)


@pytest.mark.parametrize("seed", SEEDS)
def test_word_attention_matches_loops(seed):
    rng = np.random.default_rng(seed)
    spans = oracles.random_spans(rng, int(rng.integers(2, 7)))
    T = spans[-1][1]
    att = oracles.random_causal_attention(rng, (T, T))
    got = word_level_attention(att, spans)
    np.testing.assert_allclose(got, oracles.word_attention(att, spans), rtol=0, atol=1e-12)
    # rows still sum to one and stay causal at word level
    np.testing.assert_allclose(got.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(got, 1) == 0)


def test_word_attention_single_token_words_is_identity():
    att = oracles.random_causal_attention(np.random.default_rng(0), (5, 5))
    assert word_level_attention(att, [(i, i + 1) for i in range(5)]).tobytes() == att.tobytes()


@pytest.mark.parametrize("spans", [[(0, 2), (3, 4)], [(0, 2), (2, 2)], [(0, 1)]])
def test_bad_spans_rejected(spans):
    with pytest.raises(MetricError):
        word_level_attention(np.eye(4), spans)


@pytest.mark.parametrize("seed", SEEDS)
def test_prefix_matching_matches_loops(seed):
    rng = np.random.default_rng(seed)
    P = int(rng.integers(2, 12))
    block = rng.integers(0, 50, size=P)
    toks = np.concatenate([block, block, block[: rng.integers(0, P)]])
    att = oracles.random_causal_attention(rng, (2, 3, len(toks), len(toks)))
    got = prefix_matching_score(att, toks, P)
    for l in range(2):
        for h in range(3):
            assert got[l, h] == pytest.approx(oracles.prefix_matching(att[l, h], P), abs=1e-12)


@pytest.mark.parametrize("P", [2, 5, 28])
def test_uniform_attention_prefix_matching_closed_form(P):
    from fractions import Fraction
    T = 2 * P
    att = np.tril(np.ones((T, T))) / np.arange(1, T + 1)[:, None]
    expected = sum(Fraction(1, i + 1) for i in range(P + 1, 2 * P)) / (P - 1)
    assert prefix_matching_score(att, np.tile(np.arange(P), 2), P) == pytest.approx(float(expected), abs=1e-15)


def test_perfect_copier_scores_one():
    P = 7
    T = 2 * P
    att = np.zeros((T, T))
    att[0, 0] = 1
    for i in range(1, T):
        att[i, i - P + 1 if i > P else i] = 1.0
    assert prefix_matching_score(att, np.tile(np.arange(P), 2), P) == 1.0
    assert prefix_matching_score(att, np.tile(np.arange(P), 2), P, bounds="literal") == pytest.approx(
        1.0 + att[P, 1] / (P - 1))


def test_prefix_matching_rejects_aperiodic():
    with pytest.raises(MetricError):
        prefix_matching_score(np.eye(6), [1, 2, 3, 1, 2, 4], 3)
    with pytest.raises(MetricError):
        prefix_matching_score(np.eye(5), [1, 2, 3, 1, 2], 3)


@pytest.mark.parametrize("seed", SEEDS)
def test_icl_matches_loops(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(30, 80))
    cfg = ICLConfig.scaled(T)
    losses = rng.exponential(2.0, size=(int(rng.integers(1, 5)), T))
    assert icl_score(losses, cfg) == pytest.approx(oracles.icl(losses, cfg.early, cfg.late), abs=1e-9)


def test_icl_config():
    assert ICLConfig.scaled(1024) == ICLConfig()
    assert ICLConfig.scaled(64) == ICLConfig((2, 4), (28, 34))
    with pytest.raises(MetricError):
        ICLConfig((10, 20), (15, 30))
    with pytest.raises(MetricError):
        icl_score(np.zeros((1, 100)))


def test_icl_sign():
    losses = np.linspace(5, 1, 1024)[None, :]
    assert icl_score(losses) > 0


@pytest.mark.parametrize("seed", SEEDS)
def test_head_sas_score_matches_loops(seed):
    rng = np.random.default_rng(seed)
    sents = [oracles.random_tree(rng, int(rng.integers(2, 9))) for _ in range(4)]
    atts = [oracles.random_causal_attention(rng, (2, 2, len(s), len(s)), quantize=4 if seed % 2 else None)
            for s in sents]
    scores, skipped = head_sas_score(atts, sents)
    assert skipped == 0
    total = sum(len(s) for s in sents)
    for l in range(2):
        for h in range(2):
            hits = sum(oracles.sas_hits(a[l, h], s) for a, s in zip(atts, sents))
            assert scores[l, h] == hits / total


def test_head_sas_skips_unparsed_sentences():
    s = Sentence(["a"], [-1], ["root"])
    t = Sentence(["a", "b"], [-1, 0], ["root", "obj"])
    scores, skipped = head_sas_score([np.ones((1, 1)), np.array([[1.0, 0.0], [1.0, 0.0]])], [s, t])
    assert skipped == 1
    # word 0 argmax is itself (not an edge), word 1 attends to its parent
    assert scores == 0.5


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("scaled", [False, True])
def test_uas_matches_loops(seed, scaled):
    rng = np.random.default_rng(seed)
    sents = [oracles.random_tree(rng, int(rng.integers(2, 8))) for _ in range(5)]
    atts = [oracles.random_causal_attention(rng, (2, 3, len(s), len(s)), quantize=5 if seed % 3 == 0 else None)
            for s in sents]
    res = uas(atts, DepAnnotatedText(sents), scaled=scaled)
    ref, best = oracles.uas(atts, sents, scaled=scaled)
    assert res.uas == ref
    assert res.best_heads == best


def test_uas_perfect_parent_head():
    s = Sentence(["the", "dog", "barks"], [1, 2, -1], ["det", "nsubj", "root"])
    att = np.zeros((1, 2, 3, 3))
    att[0, 0] = [[1, 0, 0], [0.9, 0.1, 0], [0, 1, 0]]
    att[0, 1] = np.tril(np.ones((3, 3))) / np.arange(1, 4)[:, None]
    res = uas([att], DepAnnotatedText([s]))
    assert res.uas == 1.0
    assert res.best_heads["det"][:2] == (0, 0)


def test_uas_errors():
    s = Sentence(["a", "b"], [-1, 0], ["root", "obj"])
    with pytest.raises(MetricError):
        uas([], DepAnnotatedText([s]))
    with pytest.raises(MetricError):
        uas([np.ones((1, 1, 3, 3))], DepAnnotatedText([s]))


# --- breakthroughs ------------------------------------------------------------


def test_breakthrough_first_strict_exceedance():
    s = MetricSeries("ps", [(1, 0.05), (2, 0.1), (3, 0.2), (4, 0.05), (5, 0.3)])
    assert detect_breakthrough(s) == (3, 0.2)
    assert detect_breakthrough(MetricSeries("ps", [(1, 0.0)])) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 0.3, allow_nan=False), min_size=1, max_size=30),
       st.floats(0.01, 0.29))
def test_breakthrough_matches_set_definition(values, thr):
    pts = [(10 * (i + 1), v) for i, v in enumerate(values)]
    assert detect_breakthrough(MetricSeries("m", pts), BreakthroughConfig(thr)) == oracles.first_above(pts, thr)


def test_series_validation():
    with pytest.raises(MetricError):
        MetricSeries("m", [(2, 0.1), (2, 0.2)])
    with pytest.raises(MetricError):
        MetricSeries("m", [(1, float("nan"))])
    with pytest.raises(MetricError):
        BreakthroughConfig(0.0)
    with pytest.raises(MetricError):
        detect_breakthrough(MetricSeries("m", []))
