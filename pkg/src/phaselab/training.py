"""Causal-LM training with syntactic / copying attention regularizers and noise injection."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from phaselab import tensor as T
from phaselab.checkpoint import save_checkpoint
from phaselab.data.synthetic import SyntheticSpec, generate_repeated_sequences, pm_mask
from phaselab.model import AttentionTrace, Model, NoiseSpec, forward
from phaselab.tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RegularizerSpec",
    "TrainingStream",
    "WindowBatch",
    "TrainResult",
    "TrainingDiverged",
    "sas_regularizer_term",
    "copy_regularizer_term",
    "sas_pair_mask",
    "lr_at",
    "checkpoint_schedule",
    "AdamW",
    "train",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    grad_accumulation: int = 1
    weight_decay: float = 0.1
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.01
    schedule: str = "cosine"
    total_tokens: int = 10_000_000_000
    seed: int = 0
    precision: str = "f32"
    seq_len: int | None = None
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    checkpoint_scale: float = 1.0
    val_batches: int = 4

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.total_tokens <= 0:
            raise ValueError("total_tokens must be > 0")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("batch_size and grad_accumulation must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float = 0.0
    sigma: float = 0.0
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if self.kind not in ("none", "sas", "copy", "gni"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not math.isfinite(self.lam) or not math.isfinite(self.sigma):
            raise ValueError("lambda and sigma must be finite")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def active(self) -> bool:
        if self.kind in ("sas", "copy"):
            return self.lam != 0.0
        if self.kind == "gni":
            return self.sigma > 0.0
        return False

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "gni":
            return f"gni{self.sigma:g}"
        return f"{self.kind}{self.lam:g}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lam": self.lam, "sigma": self.sigma}
        if self.synthetic is not None:
            d["synthetic"] = dataclasses.asdict(self.synthetic)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RegularizerSpec:
        d = dict(d)
        syn = d.pop("synthetic", None)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(synthetic=SyntheticSpec(**syn) if syn else None, **d)


# ---------------------------------------------------------------------------
# regularizer terms


def sas_pair_mask(n_words: int, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """``(W, W)`` 0/1 mask marking the causal edge of each (child, parent) pair.

    A decoder has one attention edge per word pair, from the later word to
    the earlier one, so each pair marks ``[max(c, p), min(c, p)]``.
    """
    m = np.zeros((n_words, n_words))
    for c, p in pairs:
        if c == p:
            raise ValueError("self-loop in dependency pairs")
        m[max(c, p), min(c, p)] = 1.0
    return m


def _trace_mean(trace: AttentionTrace, per_head) -> Tensor:
    if trace.is_empty:
        return Tensor(np.zeros((), dtype=trace.weights.dtype))
    if not trace.tensors:
        trace = AttentionTrace(trace.weights, [[Tensor(trace.weights[l, h]) for h in range(trace.n_head)]
                                               for l in range(trace.n_layer)])
    total = None
    n = 0
    for row in trace.tensors:
        for att in row:
            term = per_head(att)
            total = term if total is None else T.add(total, term)
            n += 1
    batch = trace.weights.shape[2]
    return T.mul(total, 1.0 / (n * batch))


def sas_regularizer_term(trace: AttentionTrace, src: np.ndarray, dst: np.ndarray, mask: np.ndarray) -> Tensor:
    """Dependency-edge attention mass, averaged over layers, heads and batch.

    ``src`` (B, W, T) and ``dst`` (B, T, W) convert token attention to word
    attention (mean over source tokens, sum over destination tokens, see
    :func:`phaselab.metrics.span_matrices`); ``mask`` (B, W, W) comes from
    :func:`sas_pair_mask`. Within a sequence the masked weights are summed.
    """
    B, S = trace.weights.shape[2], trace.weights.shape[-1]
    if src.shape[0] != B or src.shape[2] != S or dst.shape[1] != S or mask.shape[1:] != (src.shape[1],) * 2:
        raise ValueError(f"span/trace mismatch: trace (B={B}, T={S}), src {src.shape}, dst {dst.shape}, "
                         f"mask {mask.shape}")
    dt = trace.weights.dtype
    src, dst, mask = src.astype(dt), dst.astype(dt), mask.astype(dt)

    def per_head(att):
        word = T.matmul(T.matmul(src, att), dst)
        return T.sum_all(T.mul(word, mask))

    return _trace_mean(trace, per_head)


def copy_regularizer_term(trace: AttentionTrace, pm: np.ndarray) -> Tensor:
    """Prefix-matching attention mass, averaged over layers, heads and batch.

    ``pm`` is a (B, T, T) or (T, T) 0/1 mask with ``[i, j]`` set for ``j`` in
    ``PM(i)`` (see :func:`phaselab.data.synthetic.pm_mask`).
    """
    pm = np.asarray(pm)
    S = trace.weights.shape[-1]
    if pm.shape[-2:] != (S, S):
        raise ValueError(f"pm mask {pm.shape} does not match sequence length {S}")
    if np.any(np.triu(pm, k=0)):
        raise ValueError("pm target outside causal range (j >= i)")
    pm = pm.astype(trace.weights.dtype)
    return _trace_mean(trace, lambda att: T.sum_all(T.mul(att, pm)))


# ---------------------------------------------------------------------------
# schedules


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` over ``warmup_fraction * total_steps``, then cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = config.warmup_fraction * total_steps
    if step < warm:
        return config.peak_lr * step / warm
    if total_steps == warm:
        return config.peak_lr
    progress = (step - warm) / (total_steps - warm)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


LOG_POINTS = [500_000 * 2**k for k in range(10)]
EVEN_POINTS = [500_000_000 * k for k in range(1, 21)]


def checkpoint_schedule(total_tokens: int, scale: float = 1.0) -> list[int]:
    """Log-spaced 500K..256M then every 0.5B up to 10B, times ``scale``, capped at ``total_tokens``."""
    pts = [int(round(p * scale)) for p in LOG_POINTS + EVEN_POINTS]
    out = []
    for p in pts:
        if p <= total_tokens and (not out or p > out[-1]):
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if p.data.ndim >= 2 and self.wd:
                p.data *= 1 - lr * self.wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    sas: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


@dataclass
class TrainingStream:
    """A flat token stream with optional per-token word ids and word parents.

    ``word_of_token[t]`` is a global word index (or -1, e.g. separators);
    ``parent_of_word[w]`` is the global index of ``w``'s dependency parent
    (or -1). Windows of ``seq_len + 1`` tokens are sampled uniformly, either
    from every offset or, when ``doc_starts`` is given, from document
    beginnings only.
    """

    tokens: np.ndarray
    word_of_token: np.ndarray | None = None
    parent_of_word: np.ndarray | None = None
    doc_starts: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size < 2:
            raise ValueError("training stream needs at least 2 tokens")
        if self.doc_starts is not None:
            self.doc_starts = np.asarray(self.doc_starts, dtype=np.int64)

    @property
    def has_parses(self) -> bool:
        return self.parent_of_word is not None and bool(np.any(self.parent_of_word >= 0))

    def sample(self, rng: np.random.Generator, batch: int, seq_len: int, with_sas: bool = False) -> WindowBatch:
        hi = self.tokens.size - seq_len - 1
        if hi < 0:
            raise ValueError(f"stream of {self.tokens.size} tokens shorter than seq_len + 1 = {seq_len + 1}")
        if self.doc_starts is None:
            starts = rng.integers(0, hi + 1, size=batch)
        else:
            ok = self.doc_starts[self.doc_starts <= hi]
            if ok.size == 0:
                raise ValueError(f"no document starts leave room for a window of {seq_len + 1} tokens")
            starts = ok[rng.integers(0, ok.size, size=batch)]
        return self.windows(starts, seq_len, with_sas)

    def windows(self, starts, seq_len: int, with_sas: bool = False) -> WindowBatch:
        idx = np.asarray(starts)[:, None] + np.arange(seq_len + 1)
        w = self.tokens[idx]
        sas = self._sas_matrices(starts, seq_len) if with_sas else None
        return WindowBatch(w[:, :-1], w[:, 1:], sas)

    def _sas_matrices(self, starts, seq_len: int):
        if not self.has_parses:
            raise ValueError("stream has no dependency parses")
        per = []
        for s in starts:
            wid = self.word_of_token[s:s + seq_len]
            # local words = maximal runs of equal global word id; -1 tokens form their own words
            spans, gids = [], []
            a = 0
            for t in range(1, seq_len + 1):
                if t == seq_len or wid[t] != wid[a] or wid[t] < 0:
                    spans.append((a, t))
                    gids.append(int(wid[a]))
                    a = t
            local = {g: i for i, g in enumerate(gids) if g >= 0}
            pairs = []
            for i, g in enumerate(gids):
                if g < 0:
                    continue
                p = int(self.parent_of_word[g])
                if p >= 0 and p in local:
                    pairs.append((i, local[p]))
            per.append((spans, pairs))
        W = max(len(sp) for sp, _ in per)
        B = len(per)
        src = np.zeros((B, W, seq_len))
        dst = np.zeros((B, seq_len, W))
        mask = np.zeros((B, W, W))
        for b, (spans, pairs) in enumerate(per):
            for w, (a, e) in enumerate(spans):
                src[b, w, a:e] = 1.0 / (e - a)
                dst[b, a:e, w] = 1.0
            mask[b, :len(spans), :len(spans)] = sas_pair_mask(len(spans), pairs)
        return src, dst, mask


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Model
    checkpoints: list[tuple[int, Path | None]]
    curve: list[dict]
    val_losses: dict[int, float] = field(default_factory=dict)


CURVE_FIELDS = ["step", "tokens_seen", "clm_loss", "reg_loss", "val_loss"]


def _noise_seed(seed: int, step: int, micro: int, which: int) -> int:
    return int(np.random.SeedSequence([seed, step, micro, which]).generate_state(1)[0])


def validation_loss(model: Model, batches: Sequence[WindowBatch]) -> float:
    losses = [float(T.cross_entropy(forward(model, b.inputs)[0], b.targets).data) for b in batches]
    return float(np.mean(losses))


def train(
    model: Model,
    stream: TrainingStream,
    config: TrainConfig,
    regularizers: Sequence[RegularizerSpec] = (),
    *,
    out_dir=None,
    val_stream: TrainingStream | None = None,
    checkpoint_tokens: Sequence[int] | None = None,
    synthetic_low: int = 0,
) -> TrainResult:
    """Train ``model`` in place and return checkpoints plus the loss curve.

    Every optimizer step consumes ``batch_size * grad_accumulation * seq_len``
    tokens. Copy regularization draws a fresh synthetic batch per micro-step
    (token ids from ``[synthetic_low, vocab)``); SAS regularization uses the
    CLM batch's parses. Checkpoints are written under ``out_dir`` when the
    token count first reaches each entry of ``checkpoint_tokens`` (default:
    the scaled schedule).
    """
    cfg = model.config
    seq_len = config.seq_len or cfg.context_size
    if seq_len > cfg.context_size:
        raise ValueError("seq_len exceeds model context")
    regs = [r for r in regularizers if r.active]
    sas = [r for r in regs if r.kind == "sas"]
    copy = [r for r in regs if r.kind == "copy"]
    gni = [r for r in regs if r.kind == "gni"]
    if sas and not stream.has_parses:
        raise ValueError("SAS regularization needs a stream with dependency parses")
    sigma = sum(r.sigma for r in gni) if gni else 0.0

    tokens_per_step = config.batch_size * config.grad_accumulation * seq_len
    total_steps = max(1, config.total_tokens // tokens_per_step)
    if checkpoint_tokens is None:
        checkpoint_tokens = checkpoint_schedule(config.total_tokens, config.checkpoint_scale)
    pending = sorted(set(int(t) for t in checkpoint_tokens))

    model.params = {k: v.astype(config.dtype) for k, v in model.params.items()}
    P = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    model.params = {k: t.data for k, t in P.items()}
    opt = AdamW(P, config.betas, config.eps, config.weight_decay)

    ss = np.random.SeedSequence(config.seed)
    data_rng, syn_rng, val_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    vsrc = val_stream if val_stream is not None else stream
    val_batches = [vsrc.sample(val_rng, config.batch_size, seq_len) for _ in range(config.val_batches)]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    curve: list[dict] = []
    checkpoints: list[tuple[int, Path | None]] = []
    val_losses: dict[int, float] = {}

    def save(point: int, step: int, tokens_seen: int) -> None:
        vl = validation_loss(model, val_batches)
        val_losses[point] = vl
        path = None
        if out_dir is not None:
            path = save_checkpoint(out_dir / f"ckpt_{point:015d}", model, tokens_seen=tokens_seen, step=step,
                                   seed=config.seed, extra={"schedule_tokens": point, "val_loss": vl})
        checkpoints.append((point, path))
        if curve and curve[-1]["step"] == step:
            curve[-1]["val_loss"] = vl

    while pending and pending[0] <= 0:
        save(pending.pop(0), 0, 0)

    for step in range(1, total_steps + 1):
        grads = {k: np.zeros_like(p.data) for k, p in P.items()}
        clm_total = reg_total = 0.0
        for micro in range(config.grad_accumulation):
            batch = stream.sample(data_rng, config.batch_size, seq_len, with_sas=bool(sas))
            noise = NoiseSpec(sigma, _noise_seed(config.seed, step, micro, 0)) if sigma else None
            for p in P.values():
                p.grad = None
            with T.Graph() as g:
                logits, trace = forward(model, batch.inputs, params=P, noise=noise)
                clm = T.cross_entropy(logits, batch.targets)
                loss = clm
                reg_val = 0.0
                for r in sas:
                    term = T.mul(sas_regularizer_term(trace, *batch.sas), r.lam)
                    reg_val += float(term.data)
                    loss = T.add(loss, term)
                for r in copy:
                    spec = r.synthetic or SyntheticSpec().scaled(seq_len)
                    syn, periods = generate_repeated_sequences(
                        dataclasses.replace(spec, context=seq_len), config.batch_size, cfg.vocab_size,
                        low=synthetic_low, rng=syn_rng)
                    pm = np.stack([pm_mask(seq_len, int(l)) for l in periods])
                    snoise = NoiseSpec(sigma, _noise_seed(config.seed, step, micro, 1)) if sigma else None
                    _, strace = forward(model, syn, params=P, noise=snoise)
                    term = T.mul(copy_regularizer_term(strace, pm), r.lam)
                    reg_val += float(term.data)
                    loss = T.add(loss, term)
                if config.grad_accumulation > 1:
                    loss = T.mul(loss, 1.0 / config.grad_accumulation)
            clm_v = float(clm.data)
            if not math.isfinite(clm_v) or not math.isfinite(reg_val):
                snap = None
                if out_dir is not None:
                    snap = save_checkpoint(out_dir / "diverged", model, tokens_seen=(step - 1) * tokens_per_step,
                                           step=step - 1, seed=config.seed)
                raise TrainingDiverged(f"non-finite loss at step {step} (clm={clm_v}, reg={reg_val}); "
                                       f"snapshot: {snap}")
            g.backward(loss)
            for k, p in P.items():
                if p.grad is not None:
                    grads[k] += p.grad
            clm_total += clm_v / config.grad_accumulation
            reg_total += reg_val / config.grad_accumulation
        if config.grad_clip:
            norm = math.sqrt(sum(float(np.sum(gr.astype(np.float64) ** 2)) for gr in grads.values()))
            if norm > config.grad_clip:
                s = config.grad_clip / norm
                for gr in grads.values():
                    gr *= s
        opt.step(grads, lr_at(step, total_steps, config))
        tokens_seen = step * tokens_per_step
        curve.append({"step": step, "tokens_seen": tokens_seen, "clm_loss": clm_total, "reg_loss": reg_total,
                      "val_loss": None})
        reached = []
        while pending and pending[0] <= tokens_seen:
            reached.append(pending.pop(0))
        if reached:
            # several schedule points inside one step share a model state; keep the last
            if len(reached) > 1:
                log.info("schedule points %s fall within step %d; saving %d only", reached[:-1], step, reached[-1])
            save(reached[-1], step, tokens_seen)
        if step % 100 == 0:
            log.info("step %d/%d clm %.4f reg %.4f", step, total_steps, clm_total, reg_total)

    if out_dir is not None:
        write_curve(out_dir / "loss_curve.csv", curve)
    return TrainResult(model, checkpoints, curve, val_losses)


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in curve:
            w.writerow([row["step"], row["tokens_seen"], repr(row["clm_loss"]), repr(row["reg_loss"]),
                        "" if row["val_loss"] is None else repr(row["val_loss"])])


def load_train_config(path) -> tuple[TrainConfig, list[RegularizerSpec]]:
    """JSON document ``{"train": {...TrainConfig...}, "regularizers": [{...}, ...]}``."""
    d = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(d.get("train", {})), [RegularizerSpec.from_dict(r) for r in d.get("regularizers", [])]
