import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from phaselab.data.conllu import ConlluError, Sentence, format_conllu, load_conllu, parse_conllu
from phaselab.data.grammar import ToyGrammar
from phaselab.data.reading import (AlignmentError, ReadingRow, ReadingTable, align_word_features,
                                   load_frequencies, load_reading_table, log_frequency, write_reading_table)
from phaselab.data.synthetic import (SyntheticSpec, generate_repeated_sequences, pm_mask,
                                     prefix_matching_targets)
from phaselab.data.tokenizer import (TokenizerError, Vocab, detokenize, load_pretokenized, save_pretokenized,
                                     tokenize, word_spans_from_ids)

# --- tokenizer ----------------------------------------------------------------


def test_whitespace_tokens_and_spans():
    c = tokenize(["a b a b"], byte_fallback=False)
    assert len(c.documents[0]) == 4
    assert c.word_spans[0] == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert c.documents[0][0] == c.documents[0][2]


def test_oov_word_gets_multi_token_span():
    vocab = Vocab.build(["cat dog"])
    c = tokenize(["cat zebra"], vocab=vocab)
    a, b = c.word_spans[0][1]
    assert b - a == len("zebra")
    assert c.words(0) == ["cat", "zebra"]


def test_oov_without_fallback_is_unk():
    vocab = Vocab.build(["cat dog"], byte_fallback=False)
    assert vocab.encode_word("zebra") == [1]


def test_empty_corpus_rejected():
    with pytest.raises(TokenizerError):
        tokenize(["   ", ""])


def test_vocab_is_frequency_ordered_and_capped():
    v = Vocab.build(["b a b c b a"], max_words=2, byte_fallback=False)
    assert v.tokens[2:] == ["b", "a"]


def _random_doc(rng, alphabet):
    n = rng.integers(1, 12)
    words = ["".join(rng.choice(alphabet, size=rng.integers(1, 6))) for _ in range(n)]
    seps = [" ", "  ", "\t", " \t "]
    return seps[rng.integers(4)].join(words) + (" " if rng.random() < 0.3 else "")


def test_roundtrip_1000_docs():
    rng = np.random.default_rng(0)
    alphabet = list("abcdeé中z")
    docs = [_random_doc(rng, alphabet) for _ in range(1000)]
    c = tokenize(docs, max_words=40)
    for i, d in enumerate(docs):
        assert detokenize(c.documents[i], c.vocab) == " ".join(d.split())
        assert word_spans_from_ids(c.documents[i], c.vocab) == c.word_spans[i]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Cc", "Zl", "Zp")),
                        min_size=1, max_size=5), min_size=1, max_size=8))
def test_spans_partition_tokens(words):
    c = tokenize([" ".join(words)], vocab=Vocab.build(["x"]))
    spans = c.word_spans[0]
    assert spans[0][0] == 0 and spans[-1][1] == len(c.documents[0])
    assert all(a < b for a, b in spans)
    assert all(spans[i][1] == spans[i + 1][0] for i in range(len(spans) - 1))
    assert int(c.documents[0].max()) < len(c.vocab)


def test_pretokenized_roundtrip(tmp_path):
    c = tokenize(["one two three", "two four"])
    save_pretokenized(tmp_path / "corpus", c)
    raw = np.fromfile(tmp_path / "corpus.bin", dtype="<u4")
    assert raw[len(c.documents[0])] == 0
    back = load_pretokenized(tmp_path / "corpus")
    assert [d.tolist() for d in back.documents] == [d.tolist() for d in c.documents]
    assert back.word_spans == c.word_spans


# --- CoNLL-U ------------------------------------------------------------------

TWO_WORDS = "1\tdogs\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n2\tbark\tbark\tVERB\t_\t_\t0\troot\t_\t_\n"


def test_two_word_sentence():
    d = parse_conllu(TWO_WORDS)
    s = d.sentences[0]
    assert s.parents(0) == {1}
    assert s.parents(1) == set()
    assert d.deps == [(0, 0, 1, "nsubj")]


def test_punct_relation_collected():
    text = TWO_WORDS + "3\t.\t.\tPUNCT\t_\t_\t2\tpunct\t_\t_\n"
    assert parse_conllu(text).relation_sets()["punct"] == [(0, 2, 1)]


def test_multiword_and_empty_nodes_skipped():
    text = ("1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n" + TWO_WORDS +
            "2.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n")
    s = parse_conllu(text).sentences[0]
    assert s.words == ["dogs", "bark"]


def test_malformed_line_reports_number():
    bad = TWO_WORDS + "3\tonly\tthree\n"
    with pytest.raises(ConlluError) as ei:
        parse_conllu(bad)
    assert ei.value.line == 3


def test_cycle_rejected():
    text = "1\ta\t_\t_\t_\t_\t2\tdep\t_\t_\n2\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n"
    with pytest.raises(ConlluError, match="cyclic"):
        parse_conllu(text)


def test_head_out_of_range_rejected():
    with pytest.raises(ConlluError):
        parse_conllu("1\ta\t_\t_\t_\t_\t5\tdep\t_\t_\n")


def test_relation_counts_match_line_count(tmp_path):
    sents = [s for s, _ in ToyGrammar().sample(50, seed=3)]
    path = tmp_path / "toy.conllu"
    path.write_text(format_conllu(sents), encoding="utf-8")
    expected = Counter()
    for line in path.read_text().splitlines():
        cols = line.split("\t")
        if len(cols) == 10 and cols[0].isdigit() and cols[6] != "0":
            expected[cols[7]] += 1
    got = {r: len(v) for r, v in load_conllu(path).relation_sets().items()}
    assert got == dict(expected)


def test_format_parse_roundtrip():
    sents = [s for s, _ in ToyGrammar().sample(20, seed=1, doc_id="d0")]
    back = parse_conllu(format_conllu(sents)).sentences
    assert [(s.words, s.heads, s.rels, s.doc_id) for s in back] == \
        [(s.words, s.heads, s.rels, s.doc_id) for s in sents]


def test_grammar_sentences_are_trees():
    for sent, logp in ToyGrammar().sample(200, seed=7):
        assert sent.heads.count(-1) == 1
        assert all(h != i and -1 <= h < len(sent) for i, h in enumerate(sent.heads))
        assert len(logp) == len(sent) and np.all(logp <= 0)


# --- synthetic ----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(l_min=0), dict(l_min=10, l_max=5), dict(l_max=600)])
def test_synthetic_spec_invariants(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_forced_period():
    toks, periods = generate_repeated_sequences(SyntheticSpec(50, 50, 1024, 0), 8, 100)
    assert toks.shape == (8, 1024)
    assert np.all(periods == 50)
    assert np.array_equal(toks[:, 50:], toks[:, :-50])


def test_periodicity_holds_for_every_sequence():
    toks, periods = generate_repeated_sequences(SyntheticSpec(3, 40, 128, 1), 300, 50)
    for row, l in zip(toks, periods):
        assert np.array_equal(row[l:], row[:-l])
    assert toks.min() >= 0 and toks.max() < 50


def test_tiny_vocab_rejected():
    with pytest.raises(ValueError):
        generate_repeated_sequences(SyntheticSpec(2, 4, 16), 1, 1)


def _brute_force_pm(tokens, i, period):
    # positions right after an earlier occurrence of the same local prefix
    return [j + 1 for j in range(i) if (i - j) % period == 0 and tokens[j] == tokens[i]]


def test_pm_targets_match_brute_force():
    toks, periods = generate_repeated_sequences(SyntheticSpec(3, 9, 40, 2), 20, 10**6)
    for row, l in zip(toks, periods):
        targets = prefix_matching_targets(len(row), int(l))
        for i in range(len(row)):
            assert targets[i].tolist() == _brute_force_pm(row, i, int(l))
        assert pm_mask(len(row), int(l)).sum() == sum(len(t) for t in targets)


def test_period_draw_is_uniform():
    _, periods = generate_repeated_sequences(SyntheticSpec(50, 512, 1024, 11), 10_000, 2)
    counts = np.bincount(periods - 50, minlength=463)
    assert sps.chisquare(counts).pvalue > 0.01


# --- reading features -----------------------------------------------------------


def _table(words, item="it1", start=0):
    return ReadingTable([ReadingRow(item, start + i, w, 200.0 + 10 * i) for i, w in enumerate(words)])


def test_reading_table_invariants():
    with pytest.raises(ValueError):
        ReadingTable([ReadingRow("a", 0, "x", 100.0), ReadingRow("a", 0, "y", 120.0)])
    with pytest.raises(ValueError):
        ReadingTable([ReadingRow("a", 0, "x", 0.0)])


def test_reading_table_csv_roundtrip(tmp_path):
    t = _table(["the", "cat", "sat"])
    write_reading_table(tmp_path / "rt.csv", t)
    back = load_reading_table(tmp_path / "rt.csv")
    assert back.rows == t.rows


def test_frequency_features(tmp_path):
    (tmp_path / "f.tsv").write_text("the\t100\nThe\t5\ncat\t3\n")
    freq = load_frequencies(tmp_path / "f.tsv")
    assert freq["the"] == 105
    assert log_frequency("unseen", freq) == 0.0
    assert log_frequency("cat", freq) < log_frequency("the", freq)


def test_spillover_drops_initial_words():
    words = ["w%d" % i for i in range(6)]
    ft = align_word_features(_table(words), {"it1": [1.0] * 6}, {}, mode="eye_tracking")
    assert ft.n_dropped == 2
    assert ft.keys[0] == ("it1", 2)
    ft4 = align_word_features(_table(words), {"it1": [1.0] * 6}, {}, mode="self_paced")
    assert ft4.n_dropped == 4


def test_nan_surprisal_drops_dependent_rows():
    surp = [1.0, 2.0, 3.0, float("nan"), 5.0, 6.0, 7.0]
    ft = align_word_features(_table(["w"] * 7), {"it1": surp}, {})
    assert [k[1] for k in ft.keys] == [2, 6]


def test_twenty_word_item_matches_hand_built_rows():
    words = [f"{'x' * (1 + i % 4)}{i}" for i in range(20)]
    surp = [0.5 * i + 1 for i in range(20)]
    freq = {w: 3 * i for i, w in enumerate(words)}
    ft = align_word_features(_table(words), {"it1": surp}, freq)
    rows = []
    for i in range(2, 20):
        rows.append([surp[i], surp[i - 1], surp[i - 2],
                     math.log(freq[words[i]] + 1), math.log(freq[words[i - 1]] + 1), math.log(freq[words[i - 2]] + 1),
                     len(words[i]), len(words[i - 1]), len(words[i - 2])])
    names = ["surprisal", "prev_surp", "prev2_surp", "freq", "prev_freq", "prev2_freq", "len", "prev_len", "prev2_len"]
    np.testing.assert_array_equal(ft.matrix(names), np.array(rows))
    np.testing.assert_array_equal(ft.target, [200.0 + 10 * i for i in range(2, 20)])


def test_unalignable_word_names_item_and_index():
    with pytest.raises(AlignmentError, match=r"'it1'.*5"):
        align_word_features(_table(["a"] * 6), {"it1": [1.0] * 5}, {})
    with pytest.raises(AlignmentError, match="it1"):
        align_word_features(_table(["a"] * 3), {}, {})


def test_alignment_is_a_bijection():
    t = ReadingTable(_table(["a"] * 5, "i1").rows + _table(["b"] * 7, "i2").rows)
    ft = align_word_features(t, {"i1": [1.0] * 5, "i2": [2.0] * 7}, {})
    assert len(ft) + ft.n_dropped == len(t.rows)
    assert len(set(ft.keys)) == len(ft)


def test_sentence_pairs_exclude_root():
    s = Sentence(["a", "b", "c"], [1, -1, 1], ["det", "root", "obj"])
    assert s.pairs == [(0, 1, "det"), (2, 1, "obj")]
