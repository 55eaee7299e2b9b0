"""GPT2-style decoder-only transformer built on :mod:`phaselab.tensor`.

Pre-norm blocks, learned positional embeddings, tied input/output
embeddings. Every forward pass returns the per-head attention weights so
that metrics and regularizers can consume them. Two ablation modes are
supported (full and pattern-preserving), as is Gaussian noise on the FFN
hidden activations.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from phaselab import tensor as T
from phaselab.tensor import Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "AttentionTrace",
    "AblationSpec",
    "NoiseSpec",
    "InputError",
    "init_params",
    "param_shapes",
    "forward",
    "forward_with_trace",
    "compute_surprisals",
    "token_losses",
    "ablated_forward",
]


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 50257
    context_size: int = 1024
    d_embed: int = 768
    d_ffn: int = 3072
    n_layer: int = 2
    n_head: int = 8
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_layer < 0:
            raise ValueError("n_layer must be >= 0")
        if self.n_head < 1:
            raise ValueError("n_head must be >= 1")
        if self.d_embed % self.n_head:
            raise ValueError(f"d_embed={self.d_embed} not divisible by n_head={self.n_head}")
        if self.context_size < 2:
            raise ValueError("context_size must be >= 2")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def desk(cls, vocab_size: int = 512, **overrides) -> ModelConfig:
        """CPU-trainable defaults that keep the 2-layer regime."""
        kw = dict(vocab_size=vocab_size, context_size=256, d_embed=64, d_ffn=256, n_layer=2, n_head=2)
        kw.update(overrides)
        return cls(**kw)

    @property
    def d_head(self) -> int:
        return self.d_embed // self.n_head

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in canonical (serialization) order."""
    D, F = cfg.d_embed, cfg.d_ffn
    shapes = [("wte", (cfg.vocab_size, D)), ("wpe", (cfg.context_size, D))]
    for l in range(cfg.n_layer):
        p = f"h{l}."
        shapes += [
            (p + "ln1.g", (D,)), (p + "ln1.b", (D,)),
            (p + "attn.wq", (D, D)), (p + "attn.bq", (D,)),
            (p + "attn.wk", (D, D)), (p + "attn.bk", (D,)),
            (p + "attn.wv", (D, D)), (p + "attn.bv", (D,)),
            (p + "attn.wo", (D, D)), (p + "attn.bo", (D,)),
            (p + "ln2.g", (D,)), (p + "ln2.b", (D,)),
            (p + "mlp.w1", (D, F)), (p + "mlp.b1", (F,)),
            (p + "mlp.w2", (F, D)), (p + "mlp.b2", (D,)),
        ]
    shapes += [("lnf.g", (D,)), ("lnf.b", (D,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params["wte"].dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Model:
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> Model:
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


@dataclass
class AttentionTrace:
    """Per-layer, per-head attention weights of one forward pass.

    ``weights`` has shape ``(n_layer, n_head, batch, seq, seq)``;
    ``tensors[l][h]`` holds the same values as graph tensors, so that a
    regularizer can differentiate through them.
    """

    weights: np.ndarray
    tensors: list[list[Tensor]] = field(default_factory=list, repr=False)

    @property
    def n_layer(self) -> int:
        return self.weights.shape[0]

    @property
    def n_head(self) -> int:
        return self.weights.shape[1] if self.weights.ndim > 1 else 0

    @property
    def is_empty(self) -> bool:
        return self.weights.shape[0] == 0

    def for_sequence(self, b: int = 0) -> np.ndarray:
        """Weights of batch row ``b`` as ``(n_layer, n_head, seq, seq)``."""
        return self.weights[:, :, b]


@dataclass(frozen=True)
class AblationSpec:
    targets: frozenset = frozenset()
    mode: str = "pattern_preserving"

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(tuple(t) for t in self.targets))
        if self.mode not in ("full", "pattern_preserving"):
            raise ValueError(f"unknown ablation mode {self.mode!r}")

    def validate(self, cfg: ModelConfig) -> None:
        for layer, head in self.targets:
            if not (0 <= layer < cfg.n_layer and 0 <= head < cfg.n_head):
                raise InputError(
                    f"ablation target (layer={layer}, head={head}) outside model "
                    f"with {cfg.n_layer} layers x {cfg.n_head} heads")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and >= 0")


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.dtype.kind not in "iu":
        raise InputError("token ids must be integers")
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {toks.shape}")
    if toks.shape[1] > cfg.context_size:
        raise InputError(f"sequence length {toks.shape[1]} exceeds context_size {cfg.context_size}")
    if toks.shape[1] == 0:
        raise InputError("empty sequence")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        bad = toks[(toks < 0) | (toks >= cfg.vocab_size)][0]
        raise InputError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    return toks.astype(np.int64)


def _wrap(params, requires_grad: bool = False) -> dict[str, Tensor]:
    if params and isinstance(next(iter(params.values())), Tensor):
        return params
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def forward(
    model: Model,
    tokens,
    *,
    params: dict[str, Tensor] | None = None,
    noise: NoiseSpec | None = None,
    zero_heads: Iterable[tuple[int, int]] = (),
    attn_override: np.ndarray | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Core forward pass returning graph tensors.

    ``params`` lets a caller supply ``requires_grad`` tensors (training);
    otherwise the model's arrays are wrapped as constants. ``zero_heads``
    replaces those heads' outputs with zeros. ``attn_override`` (same layout
    as ``AttentionTrace.weights``) makes every head use the given weights
    instead of computing them from queries and keys.
    """
    cfg = model.config
    toks = _check_tokens(cfg, tokens)
    P = params if params is not None else _wrap(model.params)
    dtype = P["wte"].dtype
    B, S = toks.shape
    zero_heads = set(zero_heads)
    rng = np.random.default_rng(noise.seed) if noise is not None and noise.sigma > 0 else None
    scale = 1.0 / math.sqrt(cfg.d_head)
    dh = cfg.d_head

    x = T.add(T.embedding(P["wte"], toks), T.embedding(P["wpe"], np.arange(S)))
    trace_t: list[list[Tensor]] = []
    for l in range(cfg.n_layer):
        p = f"h{l}."
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q = T.add(T.matmul(h, P[p + "attn.wq"]), P[p + "attn.bq"])
        k = T.add(T.matmul(h, P[p + "attn.wk"]), P[p + "attn.bk"])
        v = T.add(T.matmul(h, P[p + "attn.wv"]), P[p + "attn.bv"])
        heads, layer_trace = [], []
        for hd in range(cfg.n_head):
            lo, hi = hd * dh, (hd + 1) * dh
            if attn_override is not None:
                att = Tensor(attn_override[l, hd])
            else:
                qh, kh = T.slice_last(q, lo, hi), T.slice_last(k, lo, hi)
                att = T.softmax(T.mul(T.matmul(qh, kh, transpose_b=True), scale), causal=True)
            layer_trace.append(att)
            if (l, hd) in zero_heads:
                heads.append(Tensor(np.zeros((B, S, dh), dtype=dtype)))
            else:
                heads.append(T.matmul(att, T.slice_last(v, lo, hi)))
        trace_t.append(layer_trace)
        a = T.add(T.matmul(T.concat_last(heads), P[p + "attn.wo"]), P[p + "attn.bo"])
        x = T.add(x, a)
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        f = T.gelu(T.add(T.matmul(h, P[p + "mlp.w1"]), P[p + "mlp.b1"]))
        if rng is not None:
            f = T.add(f, rng.normal(0.0, noise.sigma, size=f.shape).astype(dtype))
        x = T.add(x, T.add(T.matmul(f, P[p + "mlp.w2"]), P[p + "mlp.b2"]))
    x = T.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = T.matmul(x, P["wte"], transpose_b=True)

    if trace_t:
        weights = np.stack([np.stack([a.data for a in row]) for row in trace_t])
    else:
        weights = np.zeros((0, cfg.n_head, B, S, S), dtype=dtype)
    return logits, AttentionTrace(weights, trace_t)


def _squeeze(tokens, logits: Tensor, trace: AttentionTrace):
    out = logits.data
    if np.asarray(tokens).ndim == 1:
        out = out[0]
    return out, trace


def forward_with_trace(model: Model, tokens, noise: NoiseSpec | None = None):
    """Logits ``(seq, vocab)`` (or ``(batch, seq, vocab)``) and the attention trace."""
    logits, trace = forward(model, tokens, noise=noise)
    return _squeeze(tokens, logits, trace)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def token_losses(logits: np.ndarray, tokens) -> np.ndarray:
    """Next-token losses in nats; entry ``i`` scores ``tokens[i]`` (entry 0 is NaN)."""
    toks = np.asarray(tokens)
    single = toks.ndim == 1
    if single:
        toks, logits = toks[None], logits[None]
    lp = _log_softmax(logits[:, :-1])
    nxt = toks[:, 1:]
    s = -np.take_along_axis(lp, nxt[..., None], axis=-1)[..., 0]
    out = np.concatenate([np.full((toks.shape[0], 1), np.nan), s], axis=1)
    return out[0] if single else out


def compute_surprisals(model: Model, tokens, *, ablation: AblationSpec | None = None) -> np.ndarray:
    """Per-token surprisal ``-ln P(token_i | tokens_<i)``; position 0 is NaN."""
    if np.asarray(tokens).shape[-1] < 2:
        raise InputError("need at least 2 tokens for surprisal")
    if ablation is None:
        logits, _ = forward_with_trace(model, tokens)
    else:
        logits, _ = ablated_forward(model, tokens, ablation)
    return token_losses(logits, tokens)


def ablated_forward(model: Model, tokens, spec: AblationSpec):
    """Forward pass with heads ablated.

    ``full`` zeroes the targeted heads' outputs and lets every later layer
    recompute its attention from the perturbed residual stream.
    ``pattern_preserving`` first runs the intact model to record all
    attention weights, then reruns it with the targeted heads' value path
    zeroed while every head reuses its recorded weights.
    """
    spec.validate(model.config)
    if not spec.targets:
        return forward_with_trace(model, tokens)
    if spec.mode == "full":
        logits, trace = forward(model, tokens, zero_heads=spec.targets)
    else:
        _, first = forward(model, tokens)
        logits, trace = forward(model, tokens, zero_heads=spec.targets, attn_override=first.weights)
    return _squeeze(tokens, logits, trace)
