"""Specialized-head and in-context-learning metrics.

All functions are pure and operate on numpy attention arrays whose last two
axes are ``(query/source position, key/destination position)`` and which
are causal (zero above the diagonal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from phaselab.data.conllu import DepAnnotatedText, Sentence

__all__ = [
    "MetricError",
    "MetricSeries",
    "ICLConfig",
    "BreakthroughConfig",
    "span_matrices",
    "word_level_attention",
    "prefix_matching_score",
    "icl_score",
    "head_sas_score",
    "UASResult",
    "uas",
    "detect_breakthrough",
]


class MetricError(ValueError):
    pass


@dataclass
class MetricSeries:
    metric: str
    points: list[tuple[int, float]]
    model_id: str = ""

    def __post_init__(self):
        toks = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(toks, toks[1:])):
            raise MetricError(f"{self.metric}: tokens_seen must be strictly increasing")
        if not all(math.isfinite(v) for _, v in self.points):
            raise MetricError(f"{self.metric}: non-finite value")


@dataclass(frozen=True)
class ICLConfig:
    early: tuple[int, int] = (40, 60)
    late: tuple[int, int] = (450, 550)

    def __post_init__(self):
        (a, b), (c, d) = self.early, self.late
        if not (0 <= a <= b and c <= d) or not (b < c or d < a):
            raise MetricError(f"ICL windows must be ordered and disjoint: {self.early}, {self.late}")

    @classmethod
    def scaled(cls, context: int) -> ICLConfig:
        """Windows at the same relative positions for a context other than 1024."""
        f = context / 1024
        e = (round(40 * f), round(60 * f))
        l = (round(450 * f), min(context - 1, round(550 * f)))
        return cls(e, l)


@dataclass(frozen=True)
class BreakthroughConfig:
    threshold: float = 0.1

    def __post_init__(self):
        if not self.threshold > 0:
            raise MetricError("threshold must be > 0")


# ---------------------------------------------------------------------------
# word-level conversion


def _check_spans(spans: Sequence[tuple[int, int]], n_tokens: int) -> None:
    pos = 0
    for a, b in spans:
        if a != pos or b <= a:
            raise MetricError(f"word spans must partition tokens in order; bad span ({a}, {b}) at token {pos}")
        pos = b
    if pos != n_tokens:
        raise MetricError(f"word spans cover {pos} tokens, attention has {n_tokens}")


def span_matrices(spans: Sequence[tuple[int, int]], n_tokens: int, dtype=np.float64):
    """``(src, dst)``: ``src`` (W, T) averages a word's rows, ``dst`` (T, W) sums its columns."""
    _check_spans(spans, n_tokens)
    W = len(spans)
    src = np.zeros((W, n_tokens), dtype=dtype)
    dst = np.zeros((n_tokens, W), dtype=dtype)
    for w, (a, b) in enumerate(spans):
        src[w, a:b] = 1.0 / (b - a)
        dst[a:b, w] = 1.0
    return src, dst


def word_level_attention(att: np.ndarray, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Token attention ``(..., T, T)`` to word attention ``(..., W, W)``.

    Weights to the tokens of a destination word are summed; rows of the
    tokens of a source word are averaged.
    """
    att = np.asarray(att)
    src, dst = span_matrices(spans, att.shape[-1], att.dtype)
    return src @ att @ dst


# ---------------------------------------------------------------------------
# prefix matching


def prefix_matching_score(att: np.ndarray, tokens: Sequence[int], period: int,
                          bounds: str = "normalized") -> np.ndarray:
    """Per-head prefix-matching score on a sequence repeated with ``period``.

    ``att`` is ``(..., T, T)`` with ``T >= 2 * period``; the result has the
    leading shape of ``att``. Position ``i`` in the second repetition is
    scored by its weight on ``i - (period - 1)``, the token that followed
    the earlier occurrence of ``tokens[i]``.

    ``bounds="normalized"`` sums the ``period - 1`` positions after the first
    token of the second repetition (a perfect copier scores 1.0);
    ``"literal"`` sums all ``period`` positions of the second repetition
    with the same ``1 / (period - 1)`` factor.
    """
    toks = np.asarray(tokens)
    if period < 2:
        raise MetricError("period must be >= 2")
    if toks.size < 2 * period:
        raise MetricError(f"need at least {2 * period} tokens for period {period}, got {toks.size}")
    if not np.array_equal(toks[period:2 * period], toks[:period]):
        raise MetricError(f"input is not periodic with period {period}")
    if bounds == "normalized":
        first = period + 1
    elif bounds == "literal":
        first = period
    else:
        raise MetricError(f"unknown bounds {bounds!r}")
    rows = np.arange(first, 2 * period)
    cols = rows - (period - 1)
    att = np.asarray(att)
    return att[..., rows, cols].sum(axis=-1) / (period - 1)


def icl_score(losses: np.ndarray, config: ICLConfig = ICLConfig()) -> float:
    """Mean over sequences of (mean early-window loss - mean late-window loss).

    ``losses`` is ``(N, T)``; entry ``[n, j]`` is the loss of token ``j``.
    """
    L = np.atleast_2d(np.asarray(losses, dtype=np.float64))
    (a, b), (c, d) = config.early, config.late
    if L.shape[1] <= max(b, d):
        raise MetricError(f"sequences of length {L.shape[1]} too short for windows {config.early}, {config.late}")
    early = L[:, a:b + 1].mean(axis=1)
    late = L[:, c:d + 1].mean(axis=1)
    return float((early - late).mean())


# ---------------------------------------------------------------------------
# syntactic attention


def _edge_sets(sent: Sentence) -> set[tuple[int, int]]:
    edges = set()
    for c, p, _ in sent.pairs:
        edges.add((c, p))
        edges.add((p, c))
    return edges


def head_sas_score(word_atts: Sequence[np.ndarray], sentences: Sequence[Sentence]):
    """Per-head share of words whose strongest attention edge is a dependency pair.

    ``word_atts[s]`` is the word-level attention of sentence ``s`` with shape
    ``(..., W, W)`` (typically ``(n_layer, n_head, W, W)``). Sentences without
    any dependency pair are skipped. Returns ``(scores, n_skipped)``.
    """
    if len(word_atts) != len(sentences):
        raise MetricError("one attention array per sentence required")
    hits = total = None
    skipped = 0
    for att, sent in zip(word_atts, sentences):
        att = np.asarray(att)
        if att.shape[-1] != len(sent):
            raise MetricError(f"attention over {att.shape[-1]} words, sentence has {len(sent)}")
        if not sent.pairs:
            skipped += 1
            continue
        edges = _edge_sets(sent)
        W = len(sent)
        best = np.argmax(att, axis=-1)  # ties -> lowest index
        is_edge = np.zeros((W, W), dtype=bool)
        for i, j in edges:
            is_edge[i, j] = True
        h = is_edge[np.arange(W), best].sum(axis=-1)
        hits = h if hits is None else hits + h
        total = W if total is None else total + W
    if hits is None:
        raise MetricError("no parsed sentences")
    return hits / total, skipped


def _probe_weights(att: np.ndarray, scaled: bool) -> np.ndarray:
    """Symmetric weight ``w[i, j]`` = the single causal edge between words i and j."""
    low = np.tril(att, k=-1)
    w = low + np.swapaxes(low, -1, -2)
    if scaled:
        W = att.shape[-1]
        row = np.arange(1, W + 1, dtype=att.dtype)
        s = np.maximum.outer(row, row)  # edge i<->j lives in row max(i, j)
        w = w * s
    idx = np.arange(att.shape[-1])
    w[..., idx, idx] = -np.inf
    return w


@dataclass
class UASResult:
    uas: float
    best_heads: dict[str, tuple[int, int, float]]
    recall: dict[str, np.ndarray] = field(repr=False)
    counts: dict[str, int] = field(default_factory=dict)


def uas(word_atts: Sequence[np.ndarray], deps: DepAnnotatedText, scaled: bool = False) -> UASResult:
    """Unlabeled attachment score from the best head per relation type.

    ``word_atts[s]`` is ``(n_layer, n_head, W, W)`` for sentence ``s``. Each
    head predicts word i's parent as the other word j with the largest
    weight on the one causal edge between them. For each relation the head
    with the highest recall is selected; UAS is the recall-weighted mean
    with weights ``|R|``.
    """
    if len(word_atts) != len(deps.sentences):
        raise MetricError("one attention array per sentence required")
    rel_sets = deps.relation_sets()
    if not rel_sets:
        raise MetricError("no dependency relations")
    preds = []
    for att, sent in zip(word_atts, deps.sentences):
        att = np.asarray(att, dtype=np.float64)
        if att.shape[-1] != len(sent):
            raise MetricError(f"attention over {att.shape[-1]} words, sentence has {len(sent)}")
        if len(sent) < 2:
            preds.append(None)
            continue
        preds.append(np.argmax(_probe_weights(att, scaled), axis=-1))  # (L, H, W), ties -> lowest
    recall, best, counts = {}, {}, {}
    num = den = 0
    for rel, pairs in rel_sets.items():
        hit = None
        for s, c, p in pairs:
            h = (preds[s][..., c] == p).astype(np.int64)
            hit = h if hit is None else hit + h
        r = hit / len(pairs)
        recall[rel] = r
        flat = int(np.argmax(r))
        l, hd = np.unravel_index(flat, r.shape)
        best[rel] = (int(l), int(hd), float(r.reshape(-1)[flat]))
        counts[rel] = len(pairs)
        num += int(hit.reshape(-1)[flat])
        den += len(pairs)
    return UASResult(num / den, best, recall, counts)


# ---------------------------------------------------------------------------
# breakthroughs


def detect_breakthrough(series: MetricSeries, config: BreakthroughConfig = BreakthroughConfig()):
    """First ``(tokens_seen, value)`` with value strictly above the threshold, else None."""
    if not series.points:
        raise MetricError("empty series")
    for tokens, value in series.points:
        if value > config.threshold:
            return tokens, value
    return None
