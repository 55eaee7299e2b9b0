"""Reading-time regressions, ΔLL / ΔΔLL, permutation tests and correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from phaselab.data.reading import FeatureTable, SPILLOVER, baseline_columns, surprisal_columns
from phaselab.data.tokenizer import SEP_ID, Vocab
from phaselab.model import AblationSpec, Model, compute_surprisals

__all__ = [
    "StatsError",
    "RankDeficiencyError",
    "RegressionSpec",
    "FitResult",
    "DeltaLL",
    "fit_gaussian_ols",
    "delta_ll",
    "delta_delta_ll",
    "permutation_test",
    "pearson_r",
    "fisher_z_weighted_mean",
    "pre_post_transition_correlation",
    "tipping_point",
    "word_surprisals",
]

VAR_FLOOR = 1e-12
_LOG2PI = math.log(2 * math.pi)


class StatsError(ValueError):
    pass


class RankDeficiencyError(StatsError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class RegressionSpec:
    mode: str = "eye_tracking"
    include_surprisal: bool = True

    def __post_init__(self):
        if self.mode not in SPILLOVER:
            raise StatsError(f"unknown mode {self.mode!r}")

    @property
    def features(self) -> list[str]:
        base = baseline_columns(self.mode)
        return surprisal_columns(self.mode) + base if self.include_surprisal else base


@dataclass
class FitResult:
    coefficients: np.ndarray  # intercept first
    variance: float
    log_densities: np.ndarray
    ll: float
    n_rows: int
    columns: list[str]


def _collinear(X: np.ndarray, names: Sequence[str]) -> list[str]:
    """Columns outside a pivoted-QR basis, plus the basis columns they depend on."""
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(X.shape) * np.finfo(float).eps if d.size else 0.0
    rank = int(np.sum(d > tol))
    basis, rest = piv[:rank], piv[rank:]
    coef, *_ = np.linalg.lstsq(X[:, basis], X[:, rest], rcond=None)
    involved = set(rest.tolist())
    for k in range(len(rest)):
        involved.update(basis[np.abs(coef[:, k]) > 1e-8].tolist())
    return [names[i] for i in sorted(involved)]


def fit_gaussian_ols(features: np.ndarray, target: np.ndarray, names: Sequence[str] | None = None) -> FitResult:
    """OLS with an intercept; LL under the maximum-likelihood residual variance."""
    y = np.asarray(target, dtype=np.float64)
    F = np.asarray(features, dtype=np.float64).reshape(len(y), -1)
    n, k = F.shape
    names = ["intercept"] + (list(names) if names is not None else [f"x{j}" for j in range(k)])
    X = np.column_stack([np.ones(n), F])
    if n <= X.shape[1]:
        raise StatsError(f"need more rows ({n}) than parameters ({X.shape[1]})")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficiencyError(_collinear(X, names))
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    var = max(float(resid @ resid) / n, VAR_FLOOR)
    logd = -0.5 * (_LOG2PI + math.log(var) + resid**2 / var)
    return FitResult(beta, var, logd, float(logd.sum()), n, names)


@dataclass
class DeltaLL:
    value: float
    per_word: np.ndarray
    keys: list[tuple[str, int]]
    base: FitResult
    full: FitResult

    @property
    def per_word_mean(self) -> float:
        return self.value / len(self.keys)


def delta_ll(table: FeatureTable, spec: RegressionSpec | None = None) -> DeltaLL:
    """LL(baseline + surprisal features) - LL(baseline), with per-word contributions."""
    spec = spec or RegressionSpec(table.mode)
    if spec.mode != table.mode:
        raise StatsError(f"feature table built for {table.mode!r}, spec is {spec.mode!r}")
    base_cols = RegressionSpec(spec.mode, False).features
    full_cols = RegressionSpec(spec.mode, True).features
    base = fit_gaussian_ols(table.matrix(base_cols), table.target, base_cols)
    full = fit_gaussian_ols(table.matrix(full_cols), table.target, full_cols)
    per = full.log_densities - base.log_densities
    return DeltaLL(float(per.sum()), per, list(table.keys), base, full)


def delta_delta_ll(baseline: DeltaLL | Mapping, ablated: DeltaLL | Mapping):
    """ΔLL(ablated) - ΔLL(baseline) over the same words. Returns ``(value, per_word_diffs)``."""
    kb, vb = _keyed(baseline)
    ka, va = _keyed(ablated)
    if kb != ka:
        if set(kb) != set(ka):
            raise StatsError(f"word sets differ ({len(set(kb) ^ set(ka))} words not shared)")
        order = {k: i for i, k in enumerate(ka)}
        va = va[[order[k] for k in kb]]
    d = va - vb
    return float(d.sum()), d


def _keyed(x):
    if isinstance(x, DeltaLL):
        return list(x.keys), np.asarray(x.per_word, dtype=np.float64)
    keys = list(x)
    return keys, np.array([x[k] for k in keys], dtype=np.float64)


def permutation_test(a, b, n_perm: int = 10_000, seed: int = 0, *, two_sided: bool = False,
                     bonferroni: int = 1) -> float:
    """Within-word label-swap test on mean(a - b).

    Each permutation flips the sign of every paired difference independently.
    One-sided p is ``(1 + #{stat >= observed}) / (1 + n_perm)`` so it is never 0;
    ``bonferroni`` multiplies p (capped at 1).
    """
    ka, va = _keyed(a) if isinstance(a, (DeltaLL, Mapping)) else (None, np.asarray(a, dtype=np.float64))
    kb, vb = _keyed(b) if isinstance(b, (DeltaLL, Mapping)) else (None, np.asarray(b, dtype=np.float64))
    if ka is not None and kb is not None and ka != kb:
        if set(ka) != set(kb):
            raise StatsError("a and b must be keyed by the same words")
        order = {k: i for i, k in enumerate(kb)}
        vb = vb[[order[k] for k in ka]]
    if va.shape != vb.shape or va.ndim != 1:
        raise StatsError(f"paired values must be 1-D of equal length, got {va.shape} and {vb.shape}")
    if va.size < 2:
        raise StatsError("need at least 2 words")
    if n_perm < 1 or bonferroni < 1:
        raise StatsError("n_perm and bonferroni must be >= 1")
    d = va - vb
    obs = d.mean()
    rng = np.random.default_rng(seed)
    count = 0
    # tolerance so that exact ties (e.g. a == b) count as "equal or larger" despite float summation order
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    chunk = max(1, min(n_perm, 2_000_000 // d.size))
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, d.size), dtype=np.int8) * 2 - 1
        stats = signs @ d / d.size
        if two_sided:
            count += int(np.sum(np.abs(stats) >= abs(obs) - tol))
        else:
            count += int(np.sum(stats >= obs - tol))
        done += m
    p = (1 + count) / (1 + n_perm)
    return min(1.0, p * bonferroni)


def pearson_r(x, y) -> tuple[float, float]:
    """Product-moment r with a two-sided t-test p (n - 2 degrees of freedom)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("x and y must be 1-D of equal length")
    n = x.size
    if n < 3:
        raise StatsError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatsError("zero variance")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * scipy.stats.t.sf(abs(t), n - 2))


def fisher_z_weighted_mean(rs, weights=None) -> float:
    rs = np.asarray(rs, dtype=np.float64)
    w = np.ones_like(rs) if weights is None else np.asarray(weights, dtype=np.float64)
    if rs.size == 0 or w.shape != rs.shape:
        raise StatsError("need one weight per correlation")
    if np.any(np.abs(rs) >= 1):
        raise StatsError("Fisher z undefined for |r| >= 1")
    if np.any(w <= 0):
        raise StatsError("weights must be > 0")
    return float(np.tanh(np.sum(w * np.arctanh(rs)) / w.sum()))


def pre_post_transition_correlation(loss: Mapping[int, float], dll: Mapping[int, float], breakthrough: int | None):
    """Pearson r of ΔLL vs loss over checkpoints before / at-or-after ``breakthrough``.

    Each side is ``(r, p)`` or None when it has fewer than 3 checkpoints
    (or no variance). With no breakthrough everything is "pre".
    """
    if set(loss) != set(dll):
        raise StatsError("loss and ΔLL series must share checkpoints")
    keys = sorted(loss)
    pre = [k for k in keys if breakthrough is None or k < breakthrough]
    post = [k for k in keys if breakthrough is not None and k >= breakthrough]

    def side(ks):
        if len(ks) < 3:
            return None
        try:
            return pearson_r([loss[k] for k in ks], [dll[k] for k in ks])
        except StatsError:
            return None

    return side(pre), side(post)


def tipping_point(series: Mapping[int, float]) -> tuple[int, float]:
    """Checkpoint with the largest ΔLL; ties go to the earliest."""
    if not series:
        raise StatsError("empty series")
    best = None
    for k in sorted(series):
        if best is None or series[k] > best[1]:
            best = (k, float(series[k]))
    return best


def word_surprisals(model: Model, vocab: Vocab, items: Mapping[str, Sequence[str]], *,
                    ablation: AblationSpec | None = None) -> dict[str, np.ndarray]:
    """Per-word surprisal (nats, summed over the word's tokens) for each item.

    Each item is encoded as ``<sep> w_1 ... w_n`` so the first word is
    conditioned on the separator. Items longer than the context are scored
    with half-overlapping windows; every token keeps the score from the
    window where it has the most left context available.
    """
    C = model.config.context_size
    out = {}
    for item, words in items.items():
        ids = [SEP_ID]
        owner = [-1]
        for w_i, w in enumerate(words):
            enc = vocab.encode_word(w)
            ids.extend(enc)
            owner.extend([w_i] * len(enc))
        ids_a = np.asarray(ids, dtype=np.int64)
        tok = _windowed_surprisal(model, ids_a, C, ablation)
        s = np.zeros(len(words))
        np.add.at(s, np.asarray(owner[1:]), tok[1:])
        out[item] = s
    return out


def _windowed_surprisal(model: Model, ids: np.ndarray, C: int, ablation) -> np.ndarray:
    n = ids.size
    if n <= C:
        return compute_surprisals(model, ids, ablation=ablation)
    half = C // 2
    starts = list(range(0, n - C, half)) + [n - C]
    scores = [compute_surprisals(model, ids[s:s + C], ablation=ablation) for s in starts]
    out = np.full(n, np.nan)
    for p in range(1, n):
        # latest window that still gives p at least `half` tokens of left context
        w = max(k for k, s in enumerate(starts) if s == 0 or p - s >= half)
        out[p] = scores[w][p - starts[w]]
    return out
