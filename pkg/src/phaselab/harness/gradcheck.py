"""Finite-difference check of the full regularized training loss."""

from __future__ import annotations

import numpy as np

from phaselab import tensor as T
from phaselab.data.synthetic import pm_mask
from phaselab.model import Model, ModelConfig, NoiseSpec, forward
from phaselab.training import TrainingStream, copy_regularizer_term, sas_regularizer_term


def tiny_parsed_stream(rng, n_tokens: int = 200, vocab: int = 13) -> TrainingStream:
    """Random tokens; words of 1-2 tokens; each word's parent is a random earlier word."""
    toks = rng.integers(0, vocab, size=n_tokens)
    wot = np.cumsum(rng.random(n_tokens) < 0.7) - 1
    n_words = int(wot[-1]) + 1
    parents = np.array([int(rng.integers(0, w)) if w > 0 else -1 for w in range(n_words)])
    return TrainingStream(toks, wot, parents)


def regularized_loss_gradcheck(seed: int = 0, dtype=np.float64, lam_sas: float = 0.7, lam_copy: float = -0.4,
                               sigma: float = 0.3, n_samples: int = 6) -> float:
    """Max relative error over CLM + SAS term + copy term (with noise injection)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=13, context_size=12, d_embed=8, d_ffn=16, n_layer=2, n_head=2)
    model = Model.init(cfg, seed=seed, dtype=dtype)
    # larger init than training so attention is far from uniform
    for k, v in model.params.items():
        if v.ndim >= 2:
            model.params[k] = (v * 10).astype(dtype)
    stream = tiny_parsed_stream(rng)
    batch = stream.sample(rng, 2, 10, with_sas=True)
    period = 4
    syn = np.stack([np.resize(rng.integers(0, 13, size=period), 10) for _ in range(2)])
    pm = np.stack([pm_mask(10, period)] * 2)
    P = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}

    def loss_fn():
        logits, trace = forward(model, batch.inputs, params=P, noise=NoiseSpec(sigma, seed))
        loss = T.cross_entropy(logits, batch.targets)
        loss = T.add(loss, T.mul(sas_regularizer_term(trace, *batch.sas), lam_sas))
        _, strace = forward(model, syn, params=P, noise=NoiseSpec(sigma, seed + 1))
        return T.add(loss, T.mul(copy_regularizer_term(strace, pm), lam_copy))

    return T.check_gradients(loss_fn, list(P.values()), n_samples=n_samples, seed=seed)
