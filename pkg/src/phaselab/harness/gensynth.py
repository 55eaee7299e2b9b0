"""Desk-scale synthetic inputs: grammar text with parses, repeated segments, reading times."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from phaselab.data.conllu import format_conllu
from phaselab.data.grammar import ToyGrammar
from phaselab.data.reading import ReadingRow, ReadingTable, log_frequency, write_frequencies, write_reading_table


@dataclass(frozen=True)
class SynthSettings:
    grammar_docs: int = 1000
    sentences_per_doc: int = 4
    repeat_docs: int = 4000
    repeat_min: int = 8
    repeat_max: int = 32
    repeat_doc_len: int = 64
    reading_items: int = 40
    sentences_per_item: int = 3
    context_size: int = 64


def _repeat_doc(rng, words: list[str], s: SynthSettings) -> list[str]:
    """A random block of words tiled to the document length."""
    k = int(rng.integers(s.repeat_min, min(s.repeat_max, s.repeat_doc_len // 2) + 1))
    block = [words[i] for i in rng.integers(0, len(words), size=k)]
    return (block * (s.repeat_doc_len // k + 1))[:s.repeat_doc_len]


def simulate_reading(words: list[str], surprisal: np.ndarray, freq: dict[str, int], rng) -> np.ndarray:
    """Reading times (ms) linear in surprisal, its spillover, length and log frequency, plus noise."""
    s = np.asarray(surprisal, dtype=np.float64)
    prev = np.concatenate([[0.0], s[:-1]])
    length = np.array([len(w) for w in words], dtype=np.float64)
    lf = np.array([log_frequency(w, freq) for w in words])
    rt = 180.0 + 25.0 * s + 10.0 * prev + 4.0 * length - 5.0 * lf + rng.normal(0, 20.0, size=len(words))
    return np.maximum(rt, 50.0)


def generate(out_dir, seed: int = 0, settings: SynthSettings = SynthSettings()) -> dict[str, Path]:
    """Write corpus.txt, train.conllu, reading.csv, freq.tsv and plan.json into ``out_dir``.

    Corpus line ``i`` is document ``doc{i}``. Grammar documents (with
    parses in the CoNLL-U file) and periodic documents are shuffled
    together by a seeded permutation.
    """
    if not 1 <= settings.repeat_min <= settings.repeat_doc_len // 2:
        raise ValueError("repeat_min must lie in [1, repeat_doc_len / 2]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = ToyGrammar()
    ss = np.random.SeedSequence(seed)
    s_gram, s_rep, s_read, s_noise = ss.spawn(4)
    lines, parsed = [], []
    gram_seed = int(s_gram.generate_state(1)[0])
    for d in range(settings.grammar_docs):
        doc_id = f"doc{d}"
        sents = [s for s, _ in g.sample(settings.sentences_per_doc, seed=gram_seed + d, doc_id=doc_id)]
        parsed.extend(sents)
        lines.append(" ".join(w for s in sents for w in s.words))
    rng = np.random.default_rng(s_rep)
    for _ in range(settings.repeat_docs):
        lines.append(" ".join(_repeat_doc(rng, g.words, settings)))
    # interleave deterministically so both kinds appear throughout the stream
    order = np.random.default_rng(s_rep.spawn(1)[0]).permutation(len(lines))
    remap = {f"doc{int(old)}": f"doc{new}" for new, old in enumerate(order)}
    lines = [lines[i] for i in order]
    for s in parsed:
        s.doc_id = remap[s.doc_id]
    parsed.sort(key=lambda s: int(s.doc_id[3:]))  # stable: keeps sentence order within a doc

    paths = {k: out / v for k, v in dict(corpus="corpus.txt", conllu="train.conllu", reading="reading.csv",
                                          freq="freq.tsv", plan="plan.json").items()}
    paths["corpus"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["conllu"].write_text(format_conllu(parsed), encoding="utf-8")
    freq = dict(Counter(w.lower() for line in lines for w in line.split()))
    write_frequencies(paths["freq"], freq)

    rows = []
    read_seed = int(s_read.generate_state(1)[0])
    noise = np.random.default_rng(s_noise)
    for it in range(settings.reading_items):
        sample = g.sample(settings.sentences_per_item, seed=read_seed + it)
        words = [w for s, _ in sample for w in s.words]
        surprisal = -np.concatenate([lp for _, lp in sample])
        rt = simulate_reading(words, surprisal, freq, noise)
        rows.extend(ReadingRow(f"item{it}", i, w, round(float(m), 3)) for i, (w, m) in enumerate(zip(words, rt)))
    write_reading_table(paths["reading"], ReadingTable(rows))
    paths["plan"].write_text(json.dumps(default_plan(settings), indent=2, sort_keys=True) + "\n")
    return paths


def default_plan(settings: SynthSettings = SynthSettings()) -> dict:
    C = settings.context_size
    return {
        "name": "desk",
        "seed": 0,
        "corpus": "corpus.txt",
        "conllu": "train.conllu",
        "reading": [{"name": "synthetic_et", "path": "reading.csv", "freq": "freq.tsv", "mode": "eye_tracking"}],
        "models": [{"name": "L2", "vocab_size": None, "context_size": C, "d_embed": 64, "d_ffn": 256,
                    "n_layer": 2, "n_head": 2}],
        "regularizers": [{"kind": "none"}, {"kind": "copy", "lam": 0.01,
                                             "synthetic": {"l_min": 8, "l_max": C // 2, "context": C}}],
        "train": {"batch_size": 32, "seq_len": C, "total_tokens": 32 * C * 1000, "peak_lr": 1e-3,
                  "warmup_fraction": 0.05},
        "checkpoint_scale": 0.004,
        "metrics": ["ps", "uas", "sas", "icl", "val_loss"],
        "probe": {"ps_period": 28, "ps_sequences": 16, "uas_sentences": 100, "icl_windows": 16, "n_perm": 10000},
    }
