"""Whitespace tokenizer with a frequency-capped vocabulary and byte fallback.

Id 0 is the document separator ``<sep>``, id 1 is ``<unk>``. With byte
fallback enabled, ids 2..513 are byte tokens: ``<B:xx>`` starts a word and
``<b:xx>`` continues one, so word boundaries are recoverable from ids alone.
Word types follow, most frequent first (ties broken alphabetically).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SEP, UNK = "<sep>", "<unk>"
SEP_ID, UNK_ID = 0, 1


class TokenizerError(ValueError):
    pass


def _byte_tokens() -> list[str]:
    return [f"<B:{i:02x}>" for i in range(256)] + [f"<b:{i:02x}>" for i in range(256)]


@dataclass
class Vocab:
    tokens: list[str]
    byte_fallback: bool = True

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self._first_word = 2 + (512 if self.byte_fallback else 0)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], max_words: int | None = None, byte_fallback: bool = True) -> Vocab:
        counts = Counter(w for text in texts for w in text.split())
        words = sorted(counts, key=lambda w: (-counts[w], w))
        if max_words is not None:
            words = words[:max_words]
        specials = [SEP, UNK] + (_byte_tokens() if byte_fallback else [])
        return cls(specials + words, byte_fallback)

    @property
    def word_ids(self) -> range:
        """Ids of whole-word tokens (no specials, no byte tokens)."""
        return range(self._first_word, len(self.tokens))

    def encode_word(self, word: str) -> list[int]:
        i = self.index.get(word)
        if i is not None and i >= self._first_word:
            return [i]
        if not self.byte_fallback:
            return [UNK_ID]
        raw = word.encode("utf-8")
        return [2 + raw[0]] + [2 + 256 + b for b in raw[1:]]

    def is_word_start(self, i: int) -> bool:
        return not (self.byte_fallback and 258 <= i < 514)

    def decode_words(self, ids: Sequence[int]) -> list[str]:
        words: list[bytearray | str] = []
        for i in ids:
            i = int(i)
            if self.byte_fallback and 2 <= i < 514:
                b = (i - 2) % 256
                if i < 258 or not words or isinstance(words[-1], str):
                    words.append(bytearray([b]))
                else:
                    words[-1].append(b)
            else:
                words.append(self.tokens[i])
        return [w.decode("utf-8", errors="replace") if isinstance(w, bytearray) else w for w in words]

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "byte_fallback": self.byte_fallback, "separator_id": SEP_ID}

    @classmethod
    def from_json(cls, d: dict) -> Vocab:
        return cls(list(d["tokens"]), bool(d["byte_fallback"]))


@dataclass
class TokenizedCorpus:
    documents: list[np.ndarray]
    vocab: Vocab
    word_spans: list[list[tuple[int, int]]]

    def words(self, doc: int) -> list[str]:
        ids = self.documents[doc]
        return [" ".join(self.vocab.decode_words(ids[a:b])) for a, b in self.word_spans[doc]]


def tokenize(texts: Sequence[str] | str, vocab: Vocab | None = None, max_words: int | None = None,
             byte_fallback: bool = True) -> TokenizedCorpus:
    """Tokenize documents (one string each; a single string is split into lines)."""
    if isinstance(texts, str):
        texts = texts.splitlines()
    texts = [t for t in texts if t.strip()]
    if not texts:
        raise TokenizerError("empty corpus")
    if vocab is None:
        vocab = Vocab.build(texts, max_words=max_words, byte_fallback=byte_fallback)
    docs, spans = [], []
    for text in texts:
        ids: list[int] = []
        doc_spans = []
        for w in text.split():
            start = len(ids)
            ids.extend(vocab.encode_word(w))
            doc_spans.append((start, len(ids)))
        docs.append(np.asarray(ids, dtype=np.int64))
        spans.append(doc_spans)
    return TokenizedCorpus(docs, vocab, spans)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.decode_words(ids))


def word_spans_from_ids(ids: Sequence[int], vocab: Vocab) -> list[tuple[int, int]]:
    starts = [k for k, i in enumerate(ids) if vocab.is_word_start(int(i))]
    return [(a, b) for a, b in zip(starts, starts[1:] + [len(ids)])]


def save_pretokenized(path, corpus: TokenizedCorpus) -> None:
    """Write ``<path>.bin`` (u32 LE ids, documents joined by the separator) and ``<path>.json``."""
    path = Path(path)
    stream = []
    for d in corpus.documents:
        stream.append(d)
        stream.append(np.array([SEP_ID]))
    np.concatenate(stream).astype("<u4").tofile(path.with_suffix(".bin"))
    meta = {"vocab": corpus.vocab.to_json(), "separator_id": SEP_ID, "n_documents": len(corpus.documents)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_pretokenized(path) -> TokenizedCorpus:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    vocab = Vocab.from_json(meta["vocab"])
    sep = meta["separator_id"]
    ids = np.fromfile(path.with_suffix(".bin"), dtype="<u4").astype(np.int64)
    if ids.size and ids.max() >= len(vocab):
        raise TokenizerError(f"{path}: id {ids.max()} outside vocabulary of {len(vocab)}")
    cuts = np.flatnonzero(ids == sep)
    docs, prev = [], 0
    for c in cuts:
        if c > prev:
            docs.append(ids[prev:c])
        prev = c + 1
    if prev < ids.size:
        docs.append(ids[prev:])
    return TokenizedCorpus(docs, vocab, [word_spans_from_ids(d, vocab) for d in docs])
