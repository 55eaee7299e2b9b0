"""CoNLL-U reader producing child-to-parent dependency maps.

Multiword-token lines (``1-2``) and empty nodes (``3.1``) are skipped. Word
indices are 0-based within a sentence; the root word has no parent pair.
A ``# newdoc id = ...`` comment opens a new document.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path


class ConlluError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path: str | None = None):
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + msg)
        self.line = line


@dataclass
class Sentence:
    words: list[str]
    heads: list[int]  # parent word index, -1 for root
    rels: list[str]
    doc_id: str | None = None

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pairs(self) -> list[tuple[int, int, str]]:
        """(child, parent, relation) for every non-root word, in word order."""
        return [(i, h, r) for i, (h, r) in enumerate(zip(self.heads, self.rels)) if h >= 0]

    def parents(self, i: int) -> set[int]:
        return {self.heads[i]} if self.heads[i] >= 0 else set()


@dataclass
class DepAnnotatedText:
    sentences: list[Sentence] = field(default_factory=list)

    @property
    def deps(self) -> list[tuple[int, int, int, str]]:
        """(sentence, child, parent, relation) over the whole text."""
        return [(s, c, p, r) for s, sent in enumerate(self.sentences) for c, p, r in sent.pairs]

    def relation_sets(self) -> dict[str, list[tuple[int, int, int]]]:
        """Relation label -> ordered (sentence, child, parent) pairs."""
        out: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
        for s, c, p, r in self.deps:
            out[r].append((s, c, p))
        return dict(sorted(out.items()))

    def documents(self) -> dict[str, list[Sentence]]:
        docs: dict[str, list[Sentence]] = {}
        for s in self.sentences:
            docs.setdefault(s.doc_id, []).append(s)
        return docs


def _check_tree(heads: list[int], start_line: int, path) -> None:
    for i in range(len(heads)):
        seen, j = set(), i
        while heads[j] >= 0:
            if j in seen:
                raise ConlluError(f"cyclic heads in sentence starting at word {i + 1}", start_line, path)
            seen.add(j)
            j = heads[j]


def parse_conllu(text: str, path: str | None = None) -> DepAnnotatedText:
    out = DepAnnotatedText()
    words, heads, rels = [], [], []
    doc_id = None
    start = None

    def flush():
        nonlocal words, heads, rels
        if words:
            bad = [h for h in heads if h >= len(words)]
            if bad:
                raise ConlluError(f"head {bad[0] + 1} beyond sentence length {len(words)}", start, path)
            _check_tree(heads, start, path)
            out.sentences.append(Sentence(words, heads, rels, doc_id))
        words, heads, rels = [], [], []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("newdoc"):
                flush()
                doc_id = body.split("=", 1)[1].strip() if "=" in body else str(len(out.sentences))
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"expected 10 tab-separated columns, got {len(cols)}", lineno, path)
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue
        if start is None or not words:
            start = lineno
        try:
            idx, head = int(tid), int(cols[6])
        except ValueError:
            raise ConlluError(f"non-integer ID/HEAD ({tid!r}, {cols[6]!r})", lineno, path) from None
        if idx != len(words) + 1:
            raise ConlluError(f"word ID {idx} out of sequence (expected {len(words) + 1})", lineno, path)
        if head < 0:
            raise ConlluError(f"negative head {head}", lineno, path)
        if head == idx:
            raise ConlluError(f"word {idx} is its own head", lineno, path)
        words.append(cols[1])
        heads.append(head - 1)
        rels.append(cols[7] if cols[7] != "_" else "dep")
    flush()
    return out


def load_conllu(path) -> DepAnnotatedText:
    path = Path(path)
    return parse_conllu(path.read_text(encoding="utf-8"), str(path))


def format_conllu(sentences: list[Sentence]) -> str:
    lines = []
    doc = object()
    for s in sentences:
        if s.doc_id is not None and s.doc_id != doc:
            lines.append(f"# newdoc id = {s.doc_id}")
            doc = s.doc_id
        lines.append("# text = " + " ".join(s.words))
        for i, (w, h, r) in enumerate(zip(s.words, s.heads, s.rels)):
            lines.append("\t".join([str(i + 1), w, "_", "_", "_", "_", str(h + 1), r, "_", "_"]))
        lines.append("")
    return "\n".join(lines) + "\n"
