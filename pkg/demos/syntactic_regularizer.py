"""
Pushing attention toward or away from dependency edges
======================================================

Train the same small model on a toy annotated grammar three times with a
syntactic regularizer weight of +0.01, 0 and -0.01. Then measure how much
attention lands on dependency-connected word pairs in held-out text, and
report the UAS of the best head per relation.
"""

import numpy as np

from phaselab.data.conllu import DepAnnotatedText
from phaselab.data.grammar import ToyGrammar
from phaselab.data.tokenizer import Vocab
from phaselab.harness.commands import _stream, sentence_word_attentions
from phaselab.metrics import uas
from phaselab.model import Model, ModelConfig, forward_with_trace
from phaselab.training import RegularizerSpec, TrainConfig, sas_regularizer_term, train

grammar = ToyGrammar()


def documents(n, seed):
    docs, parses = [], []
    for d in range(n):
        sents = [s for s, _ in grammar.sample(4, seed=seed + d)]
        docs.append([w for s in sents for w in s.words])
        parses.append(sents)
    return docs, parses


train_docs, held_docs = documents(400, 0), documents(50, 10_000)
vocab = Vocab.build([" ".join(d) for d in train_docs[0] + held_docs[0]], byte_fallback=False)
stream, held = _stream(*train_docs, vocab), _stream(*held_docs, vocab)
print(f"vocabulary {len(vocab)}, training tokens {stream.tokens.size}")

probe = held.sample(np.random.default_rng(123), 64, 32, with_sas=True)
held_sents = [s for doc in held_docs[1] for s in doc][:100]
cfg = ModelConfig(vocab_size=len(vocab), context_size=32, d_embed=32, d_ffn=64, n_layer=2, n_head=2)

for lam in (0.01, 0.0, -0.01):
    model = Model.init(cfg, seed=0)
    tc = TrainConfig(batch_size=16, seq_len=32, total_tokens=16 * 32 * 150, peak_lr=3e-3, warmup_fraction=0.05)
    res = train(model, stream, tc, [RegularizerSpec("sas", lam)], checkpoint_tokens=[])
    _, trace = forward_with_trace(model, probe.inputs)
    mass = float(sas_regularizer_term(trace, *probe.sas).data)
    score = uas(sentence_word_attentions(model, vocab, held_sents), DepAnnotatedText(held_sents)).uas
    print(f"lambda {lam:+.2f}: loss {res.curve[-1]['clm_loss']:.3f}  edge mass {mass:7.3f}  UAS {score:.3f}")

# A positive weight penalizes edge attention, a negative one rewards it.
