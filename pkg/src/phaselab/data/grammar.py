"""A small probabilistic grammar that emits dependency-annotated sentences.

Subject-verb and determiner-noun number agreement make the dependency
parent informative for next-word prediction, which gives attention heads a
reason to track syntax. Every generated word also carries the probability of
the choice that produced it, used as a ground-truth surprisal when
simulating reading times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from phaselab.data.conllu import Sentence

_NOUNS = ["dog", "cat", "bird", "child", "farmer", "teacher", "king", "queen", "horse", "fox",
          "wolf", "student", "doctor", "baker", "sailor", "poet", "judge", "pilot", "singer", "lawyer"]
_PLURAL = {"child": "children", "wolf": "wolves", "fox": "foxes"}
_VERBS_T = ["see", "chase", "help", "follow", "admire", "call", "watch", "praise", "meet", "know"]
_VERBS_I = ["sleep", "run", "laugh", "smile", "wait", "sing"]
_ADJ = ["big", "small", "old", "young", "happy", "quiet", "brave", "clever", "tired", "kind"]
_PREP = ["near", "behind", "with", "beside", "under"]
_DET_SG = ["a", "this", "every"]
_DET_PL = ["these", "many", "some"]
_DET_ANY = ["the"]
_ADV = ["often", "rarely", "quickly", "slowly"]


def _plural(n: str) -> str:
    return _PLURAL.get(n, n + "s")


def _third(v: str) -> str:
    return v + ("es" if v.endswith(("ch", "sh", "s")) else "s")


@dataclass
class GrammarWord:
    form: str
    head: int
    rel: str
    logp: float


@dataclass
class ToyGrammar:
    p_adj: float = 0.3
    p_pp: float = 0.2
    p_transitive: float = 0.6
    p_adv: float = 0.15
    p_plural: float = 0.5
    max_depth: int = 2
    words: list[str] = field(init=False)

    def __post_init__(self):
        nouns = _NOUNS + [_plural(n) for n in _NOUNS]
        verbs = [_third(v) for v in _VERBS_T + _VERBS_I] + _VERBS_T + _VERBS_I
        self.words = sorted(set(nouns + verbs + _ADJ + _PREP + _DET_SG + _DET_PL + _DET_ANY + _ADV + ["."]))

    # each _pick returns (item, log-probability of the choice)
    @staticmethod
    def _pick(rng, items):
        return items[rng.integers(len(items))], -math.log(len(items))

    def _flip(self, rng, p):
        hit = rng.random() < p
        return hit, math.log(p if hit else 1 - p)

    def _np(self, rng, out: list[GrammarWord], head: int, rel: str, depth: int) -> tuple[int, bool]:
        plural, lp_num = self._flip(rng, self.p_plural)
        dets = (_DET_PL if plural else _DET_SG) + _DET_ANY
        det, lp_det = self._pick(rng, dets)
        det_i = len(out)
        out.append(GrammarWord(det, -2, "det", lp_num + lp_det))
        adj_idx = []
        has_adj, lp = self._flip(rng, self.p_adj)
        if has_adj:
            a, lpa = self._pick(rng, _ADJ)
            adj_idx.append(len(out))
            out.append(GrammarWord(a, -2, "amod", lp + lpa))
        else:
            out[det_i].logp += lp
        noun, lpn = self._pick(rng, _NOUNS)
        form = _plural(noun) if plural else noun
        n_i = len(out)
        out.append(GrammarWord(form, head, rel, lpn))
        out[det_i].head = n_i
        for a in adj_idx:
            out[a].head = n_i
        if depth < self.max_depth:
            has_pp, lp = self._flip(rng, self.p_pp)
            out[n_i].logp += lp
            if has_pp:
                p, lpp = self._pick(rng, _PREP)
                p_i = len(out)
                out.append(GrammarWord(p, -2, "case", lpp))
                obj, _ = self._np(rng, out, n_i, "nmod", depth + 1)
                out[p_i].head = obj
        return n_i, plural

    def sentence(self, rng) -> list[GrammarWord]:
        out: list[GrammarWord] = []
        subj, plural = self._np(rng, out, -2, "nsubj", 0)
        has_adv, lp_adv = self._flip(rng, self.p_adv)
        adv_i = None
        if has_adv:
            a, lpa = self._pick(rng, _ADV)
            adv_i = len(out)
            out.append(GrammarWord(a, -2, "advmod", lp_adv + lpa))
        transitive, lp_t = self._flip(rng, self.p_transitive)
        v, lpv = self._pick(rng, _VERBS_T if transitive else _VERBS_I)
        form = v if plural else _third(v)
        v_i = len(out)
        out.append(GrammarWord(form, -1, "root", lp_t + lpv + (0.0 if has_adv else lp_adv)))
        out[subj].head = v_i
        if adv_i is not None:
            out[adv_i].head = v_i
        if transitive:
            self._np(rng, out, v_i, "obj", 1)
        out.append(GrammarWord(".", v_i, "punct", 0.0))
        return out

    def sample(self, n: int, seed: int = 0, doc_id: str | None = None):
        """``n`` sentences as (:class:`Sentence`, per-word log-probabilities)."""
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            ws = self.sentence(rng)
            sent = Sentence([w.form for w in ws], [w.head for w in ws], [w.rel for w in ws], doc_id)
            out.append((sent, np.array([w.logp for w in ws])))
        return out
