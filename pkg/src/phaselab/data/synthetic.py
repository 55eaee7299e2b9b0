"""Repeated random sequences for copy regularization and prefix-matching probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    """Period ``l ~ U{l_min..l_max}``; a random block of length ``l`` is tiled to ``context``."""

    l_min: int = 50
    l_max: int = 512
    context: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max <= self.context // 2:
            raise ValueError(
                f"need 1 <= l_min <= l_max <= context/2, got l_min={self.l_min}, "
                f"l_max={self.l_max}, context={self.context}")

    def scaled(self, context: int) -> SyntheticSpec:
        """Same proportions for a shorter context (bounds rounded, kept valid)."""
        f = context / self.context
        hi = max(1, min(context // 2, round(self.l_max * f)))
        lo = max(1, min(hi, round(self.l_min * f)))
        return SyntheticSpec(lo, hi, context, self.seed)


def generate_repeated_sequences(spec: SyntheticSpec, n: int, vocab_size: int, *, low: int = 0,
                                rng: np.random.Generator | None = None):
    """``n`` sequences of length ``spec.context`` with a uniformly drawn period each.

    Tokens are uniform over ``[low, vocab_size)``. Returns ``(tokens, periods)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if vocab_size - low < 2:
        raise ValueError(f"need at least 2 token types, got range [{low}, {vocab_size})")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    periods = rng.integers(spec.l_min, spec.l_max + 1, size=n)
    out = np.empty((n, spec.context), dtype=np.int64)
    for r, l in enumerate(periods):
        block = rng.integers(low, vocab_size, size=l)
        out[r] = np.resize(block, spec.context)
    return out, periods


def prefix_matching_targets(seq_len: int, period: int) -> list[np.ndarray]:
    """0-based ``PM(i) = {i - n*period + 1 : n >= 1, i - n*period >= 0}`` for each position.

    These are the positions right after each earlier occurrence of the token
    at ``i`` in a sequence of exact period ``period``.
    """
    out = []
    for i in range(seq_len):
        n = np.arange(1, i // period + 1)
        out.append(np.sort(i - n * period + 1))
    return out


def pm_mask(seq_len: int, period: int) -> np.ndarray:
    """Boolean ``(seq, seq)`` matrix with ``[i, j]`` set for ``j`` in ``PM(i)``."""
    m = np.zeros((seq_len, seq_len), dtype=bool)
    for i, js in enumerate(prefix_matching_targets(seq_len, period)):
        m[i, js] = True
    return m


def repeated_probe(length: int, vocab_size: int, n: int = 32, *, low: int = 0, seed: int = 0) -> np.ndarray:
    """``n`` random blocks of ``length`` ids, each repeated twice: shape ``(n, 2*length)``."""
    rng = np.random.default_rng(seed)
    block = rng.integers(low, vocab_size, size=(n, length))
    return np.concatenate([block, block], axis=1)
