"""Reading-time tables, unigram frequencies and per-word regression features.

Reading times are expected pre-aggregated: one measure per (item, word).
Features follow the spillover regressions: the current word plus the
previous 2 words (eye tracking) or 4 words (self-paced reading).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPILLOVER = {"eye_tracking": 2, "self_paced": 4}


class AlignmentError(ValueError):
    pass


@dataclass
class ReadingRow:
    item_id: str
    word_index: int
    word: str
    measure: float


@dataclass
class ReadingTable:
    rows: list[ReadingRow]

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            key = (r.item_id, r.word_index)
            if key in seen:
                raise ValueError(f"duplicate row for item {r.item_id!r}, word {r.word_index}")
            seen.add(key)
            if not r.measure > 0:
                raise ValueError(f"non-positive measure for item {r.item_id!r}, word {r.word_index}")

    def items(self) -> dict[str, list[ReadingRow]]:
        """Rows grouped by item, each group sorted by word index; items in first-seen order."""
        out: dict[str, list[ReadingRow]] = {}
        for r in self.rows:
            out.setdefault(r.item_id, []).append(r)
        return {k: sorted(v, key=lambda r: r.word_index) for k, v in out.items()}

    def item_words(self) -> dict[str, list[str]]:
        return {k: [r.word for r in v] for k, v in self.items().items()}


def load_reading_table(path) -> ReadingTable:
    """CSV with header ``item_id,word_index,word,measure_ms``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"item_id", "word_index", "word", "measure_ms"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, r in enumerate(reader, 2):
            try:
                rows.append(ReadingRow(r["item_id"], int(r["word_index"]), r["word"], float(r["measure_ms"])))
            except ValueError as e:
                raise ValueError(f"{path}:{line}: {e}") from None
    return ReadingTable(rows)


def write_reading_table(path, table: ReadingTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item_id", "word_index", "word", "measure_ms"])
        for r in table.rows:
            w.writerow([r.item_id, r.word_index, r.word, repr(float(r.measure))])


def load_frequencies(path) -> dict[str, int]:
    """TSV ``word<TAB>count``; keys are lowercased and counts summed."""
    freq: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for line, raw in enumerate(f, 1):
            raw = raw.rstrip("\n")
            if not raw:
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{line}: expected word<TAB>count")
            key = parts[0].lower()
            freq[key] = freq.get(key, 0) + int(parts[1])
    return freq


def log_frequency(word: str, freq: Mapping[str, int]) -> float:
    return math.log(freq.get(word.lower(), 0) + 1)


@dataclass
class FeatureTable:
    """Regression-ready rows after spillover construction and missing-row drops."""

    keys: list[tuple[str, int]]
    columns: dict[str, np.ndarray]
    target: np.ndarray
    mode: str
    n_dropped: int = 0
    dropped: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.columns[n] for n in names]) if names else np.empty((len(self), 0))


def _lag_name(base: str, lag: int) -> str:
    return base if lag == 0 else ("prev_" if lag == 1 else f"prev{lag}_") + base


def surprisal_column(lag: int) -> str:
    return "surprisal" if lag == 0 else _lag_name("surp", lag)


def baseline_columns(mode: str) -> list[str]:
    k = SPILLOVER[mode]
    return [_lag_name("freq", j) for j in range(k + 1)] + [_lag_name("len", j) for j in range(k + 1)]


def surprisal_columns(mode: str) -> list[str]:
    return [surprisal_column(j) for j in range(SPILLOVER[mode] + 1)]


def align_word_features(table: ReadingTable, surprisals: Mapping[str, Sequence[float]],
                        freq: Mapping[str, int], mode: str = "eye_tracking") -> FeatureTable:
    """Build per-word predictors with spillover.

    ``surprisals[item_id][word_index]`` is the surprisal of that word (NaN
    when unavailable). A row is dropped when any of its own or its lagged
    predictors is missing, e.g. the first ``k`` words of each item.
    """
    if mode not in SPILLOVER:
        raise ValueError(f"unknown mode {mode!r}")
    k = SPILLOVER[mode]
    names = surprisal_columns(mode) + baseline_columns(mode)
    cols: dict[str, list[float]] = {n: [] for n in names}
    keys, target, dropped = [], [], []
    for item, rows in table.items().items():
        if item not in surprisals:
            raise AlignmentError(f"no surprisals for item {item!r} (word {rows[0].word_index})")
        s_item = surprisals[item]
        by_index = {r.word_index: r for r in rows}
        for r in rows:
            if r.word_index >= len(s_item) or r.word_index < 0:
                raise AlignmentError(f"item {item!r}: word index {r.word_index} ({r.word!r}) has no surprisal "
                                     f"(item has {len(s_item)} words)")
            vals = {}
            ok = True
            for lag in range(k + 1):
                prev = by_index.get(r.word_index - lag)
                if prev is None:
                    ok = False
                    break
                s = float(s_item[prev.word_index])
                if not math.isfinite(s):
                    ok = False
                    break
                vals[surprisal_column(lag)] = s
                vals[_lag_name("freq", lag)] = log_frequency(prev.word, freq)
                vals[_lag_name("len", lag)] = float(len(prev.word))
            if not ok:
                dropped.append((item, r.word_index))
                continue
            keys.append((item, r.word_index))
            target.append(r.measure)
            for n in names:
                cols[n].append(vals[n])
    return FeatureTable(keys, {n: np.asarray(v, dtype=np.float64) for n, v in cols.items()},
                        np.asarray(target, dtype=np.float64), mode, len(dropped), dropped)


def write_frequencies(path, freq: Mapping[str, int]) -> None:
    Path(path).write_text("".join(f"{w}\t{c}\n" for w, c in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))),
                          encoding="utf-8")
