"""The train / metrics / ablate / ppp / gen-synthetic / gradcheck commands.

Layout under the output directory::

    runs/<run_id>/ledger.json, loss_curve.csv, ckpt_<tokens>/
    reports/metrics_<run_id>.csv, metrics_<run_id>.json
    reports/ablate_<run_id>_<corpus>.csv, ablate_<run_id>_<corpus>.json
    reports/ppp_trajectory.csv, ppp_summary.json

Reports contain no timestamps or absolute paths, so re-running a command on
unchanged inputs reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from phaselab import tensor as T
from phaselab.checkpoint import load_checkpoint
from phaselab.data.conllu import DepAnnotatedText, Sentence, load_conllu
from phaselab.data.reading import align_word_features, load_frequencies, load_reading_table
from phaselab.data.synthetic import repeated_probe
from phaselab.data.tokenizer import SEP_ID, UNK_ID, Vocab
from phaselab.harness.plan import ExperimentPlan, PlanError, RunCell, RunLedger, corpus_vocab
from phaselab.metrics import (BreakthroughConfig, ICLConfig, MetricSeries, detect_breakthrough, head_sas_score,
                              icl_score, prefix_matching_score, uas, word_level_attention)
from phaselab.model import AblationSpec, Model, forward_with_trace
from phaselab.stats import (RegressionSpec, StatsError, delta_delta_ll, delta_ll, pearson_r, permutation_test,
                            pre_post_transition_correlation, tipping_point, word_surprisals)
from phaselab.training import TrainingDiverged, TrainingStream, train

log = logging.getLogger(__name__)

METRIC_FIELDS = ["model_id", "tokens_seen", "metric", "layer", "head", "value"]
GRID_FIELDS = ["layer", "head", "ps", "sas_score", "ddll", "corpus"]
VAL_EVERY = 10  # every 10th document is held out for validation


# ---------------------------------------------------------------------------
# I/O helpers


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])


def _reports(out) -> Path:
    p = Path(out) / "reports"
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# corpus -> token streams


@dataclass
class CorpusData:
    vocab: Vocab
    train: TrainingStream
    val: TrainingStream
    sentences: list[Sentence]


def _stream(docs: list[list[str]], parses: list[list[Sentence] | None], vocab: Vocab) -> TrainingStream:
    toks, wot, parents, starts = [], [], [], []
    for words, sents in zip(docs, parses):
        starts.append(len(toks))
        toks.append(SEP_ID)
        wot.append(-1)
        base = len(parents)
        doc_parents = [-1] * len(words)
        if sents is not None:
            off = 0
            for s in sents:
                for i, h in enumerate(s.heads):
                    if h >= 0:
                        doc_parents[off + i] = base + off + h
                off += len(s)
        for w_i, w in enumerate(words):
            for t in vocab.encode_word(w):
                toks.append(t)
                wot.append(base + w_i)
        parents.extend(doc_parents)
    return TrainingStream(np.asarray(toks), np.asarray(wot), np.asarray(parents, dtype=np.int64), np.asarray(starts))


def load_corpus(plan: ExperimentPlan) -> CorpusData:
    lines = [l for l in plan.corpus.read_text(encoding="utf-8").splitlines()]
    vocab = corpus_vocab(plan.corpus)
    docs_parsed: dict = {}
    sentences: list[Sentence] = []
    if plan.conllu is not None:
        deps = load_conllu(plan.conllu)
        sentences = deps.sentences
        docs_parsed = deps.documents()
    train_docs, train_p, val_docs, val_p = [], [], [], []
    mismatched = 0
    for i, line in enumerate(lines):
        words = line.split()
        if not words:
            continue
        sents = docs_parsed.get(f"doc{i}")
        if sents is not None and [w for s in sents for w in s.words] != words:
            mismatched += 1
            sents = None
        (val_docs if i % VAL_EVERY == VAL_EVERY - 1 else train_docs).append(words)
        (val_p if i % VAL_EVERY == VAL_EVERY - 1 else train_p).append(sents)
    if mismatched:
        log.warning("%d parsed documents do not match their corpus line; parses ignored", mismatched)
    if not val_docs:
        val_docs, val_p = train_docs, train_p
    return CorpusData(vocab, _stream(train_docs, train_p, vocab), _stream(val_docs, val_p, vocab), sentences)


# ---------------------------------------------------------------------------
# train


def _run_dir(out, run_id: str) -> Path:
    return Path(out) / "runs" / run_id


def train_cell(plan: ExperimentPlan, cell: RunCell, out) -> RunLedger:
    run_dir = _run_dir(out, cell.run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    h = cell.config_hash
    prev = RunLedger.load(run_dir)
    if prev is not None and prev.complete and prev.config_hash == h and all(
            (run_dir / c["path"]).exists() for c in prev.checkpoints):
        log.info("%s: already complete, skipping", cell.run_id)
        return prev
    ledger = RunLedger(cell.run_id, plan.seed, h, status="running")
    ledger.save(run_dir)
    try:
        data = load_corpus(plan)
        cfg = cell.model.config
        if cfg.vocab_size < len(data.vocab):
            raise PlanError(f"{cell.run_id}: vocab_size {cfg.vocab_size} < corpus vocabulary {len(data.vocab)}")
        tc = cell.train_config
        model = Model.init(cfg, seed=plan.seed, dtype=tc.dtype)
        tr, va = data.train, data.val
        # windows open at document boundaries so repeated documents are seen whole
        stream = tr if cell.reg.kind == "sas" else TrainingStream(tr.tokens, doc_starts=tr.doc_starts)
        res = train(model, stream, tc, [cell.reg], out_dir=run_dir,
                    val_stream=TrainingStream(va.tokens, doc_starts=va.doc_starts),
                    synthetic_low=2)
        ledger.checkpoints = [{"tokens": t, "path": p.name} for t, p in res.checkpoints]
        ledger.status = "complete"
    except (TrainingDiverged, OSError, PlanError, ValueError) as e:
        ledger.status = "failed"
        ledger.error = f"{type(e).__name__}: {e}"
        log.error("%s failed: %s", cell.run_id, e)
    ledger.save(run_dir)
    return ledger


def _train_worker(args):
    plan, idx, out = args
    return train_cell(plan, plan.cells()[idx], out)


def cmd_train(plan: ExperimentPlan, out, jobs: int = 1) -> list[RunLedger]:
    cells = plan.cells()
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_train_worker, [(plan, i, out) for i in range(len(cells))]))
    return [train_cell(plan, c, out) for c in cells]


def completed_runs(plan: ExperimentPlan, out, run_ids: Sequence[str] | None = None) -> list[RunLedger]:
    wanted = run_ids or [c.run_id for c in plan.cells()]
    ledgers = []
    for rid in wanted:
        led = RunLedger.load(_run_dir(out, rid))
        if led is None:
            raise PlanError(f"run {rid!r} not found under {out}")
        if not led.complete:
            log.warning("run %s is %s; skipped", rid, led.status)
            continue
        ledgers.append(led)
    return ledgers


def _load(out, ledger: RunLedger, ckpt: dict, plan: ExperimentPlan) -> Model:
    model, _ = load_checkpoint(_run_dir(out, ledger.run_id) / ckpt["path"], dtype=plan.train.dtype)
    return model


# ---------------------------------------------------------------------------
# metric probes


def ps_per_head(model: Model, plan: ExperimentPlan) -> np.ndarray | None:
    """Mean prefix-matching score per head on repeated random word sequences, ``(L, H)``."""
    cfg = model.config
    if cfg.n_layer == 0:
        return None
    period = min(plan.probe.ps_period, cfg.context_size // 2)
    probe = repeated_probe(period, cfg.vocab_size, n=plan.probe.ps_sequences, low=2, seed=plan.seed)
    _, trace = forward_with_trace(model, probe)
    scores = [prefix_matching_score(trace.weights[:, :, b], probe[b], period) for b in range(probe.shape[0])]
    return np.mean(scores, axis=0)


def sentence_word_attentions(model: Model, vocab: Vocab, sentences: Sequence[Sentence]) -> list[np.ndarray]:
    """Word-level attention ``(L, H, W, W)`` per sentence, each sentence run on its own."""
    out = []
    for s in sentences:
        ids, spans = [], []
        for w in s.words:
            enc = vocab.encode_word(w)
            spans.append((len(ids), len(ids) + len(enc)))
            ids.extend(enc)
        ids = ids[:model.config.context_size]
        if len(ids) < sum(b - a for a, b in spans):
            raise PlanError(f"sentence of {len(s)} words exceeds context size")
        _, trace = forward_with_trace(model, np.asarray(ids))
        out.append(word_level_attention(trace.for_sequence(0).astype(np.float64), spans))
    return out


def _probe_sentences(plan: ExperimentPlan, data: CorpusData) -> list[Sentence]:
    C = plan.models[0].config.context_size if plan.models else 0
    sents = [s for s in data.sentences if 2 <= len(s) <= C and s.pairs]
    return sents[:plan.probe.uas_sentences]


def val_windows(plan: ExperimentPlan, data: CorpusData, context: int) -> np.ndarray:
    rng = np.random.default_rng(plan.seed)
    n = data.val.tokens.size
    if n < context + 1:
        raise PlanError(f"validation stream ({n} tokens) shorter than context + 1")
    starts = rng.integers(0, n - context, size=plan.probe.icl_windows)
    return data.val.tokens[starts[:, None] + np.arange(context + 1)]


def checkpoint_metrics(model: Model, plan: ExperimentPlan, data: CorpusData, sentences, windows) -> list[tuple]:
    """``(metric, layer, head, value)`` rows for one checkpoint."""
    rows = []
    cfg = model.config
    want = set(plan.metrics)
    if "val_loss" in want or "icl" in want:
        inp, tgt = windows[:, :-1], windows[:, 1:]
        logits, _ = forward_with_trace(model, inp)
        if "val_loss" in want:
            ce = float(T.cross_entropy(T.Tensor(logits), tgt).data)
            rows.append(("val_loss", None, None, ce))
        if "icl" in want:
            # entry j = loss of the token at position j + 1 given tokens <= j
            losses = -np.take_along_axis(_log_softmax(logits), tgt[..., None], axis=-1)[..., 0]
            rows.append(("icl", None, None, icl_score(losses, ICLConfig.scaled(cfg.context_size))))
    if cfg.n_layer == 0:
        return rows
    if "ps" in want:
        ps = ps_per_head(model, plan)
        for l in range(cfg.n_layer):
            for h in range(cfg.n_head):
                rows.append(("ps", l, h, float(ps[l, h])))
        rows.append(("ps_max", None, None, float(ps.max())))
    if sentences and ("uas" in want or "sas" in want):
        atts = sentence_word_attentions(model, data.vocab, sentences)
        if "uas" in want:
            res = uas(atts, DepAnnotatedText(list(sentences)))
            rows.append(("uas", None, None, float(res.uas)))
        if "sas" in want:
            scores, _ = head_sas_score(atts, sentences)
            for l in range(cfg.n_layer):
                for h in range(cfg.n_head):
                    rows.append(("sas_score", l, h, float(scores[l, h])))
    return rows


def _log_softmax(z):
    z = z.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def breakthroughs(rows: Sequence[Sequence], threshold: float = 0.1) -> dict:
    """First checkpoint where ``ps_max`` / ``uas`` exceed ``threshold``, from metric rows.

    Rows follow :data:`METRIC_FIELDS`; model-level rows have empty layer/head.
    """
    series: dict[tuple[str, str], list] = {}
    for model_id, tokens, metric, layer, head, value in rows:
        if metric in ("ps_max", "uas") and layer in (None, ""):
            series.setdefault((model_id, metric), []).append((int(tokens), float(value)))
    out = {}
    for (model_id, metric), pts in sorted(series.items()):
        b = detect_breakthrough(MetricSeries(metric, sorted(pts), model_id), BreakthroughConfig(threshold))
        out.setdefault(model_id, {})[metric] = None if b is None else {"tokens_seen": b[0], "value": b[1]}
    return out


def read_metric_rows(path) -> list[list]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != METRIC_FIELDS:
            raise PlanError(f"{path}: unexpected header {header}")
        return [[m, int(t), k, l, h, float(v)] for m, t, k, l, h, v in r]


def cmd_metrics(plan: ExperimentPlan, out, run_ids=None) -> dict:
    data = load_corpus(plan)
    sentences = _probe_sentences(plan, data)
    if not sentences and ({"uas", "sas"} & set(plan.metrics)):
        log.warning("no dependency parses available; UAS and SAS scores skipped")
    rep = _reports(out)
    summary = {}
    for led in completed_runs(plan, out, run_ids):
        rows = []
        windows = None
        for ck in led.checkpoints:
            model = _load(out, led, ck, plan)
            if windows is None:
                windows = val_windows(plan, data, model.config.context_size)
            for metric, l, h, v in checkpoint_metrics(model, plan, data, sentences, windows):
                rows.append([led.run_id, ck["tokens"], metric, l, h, v])
        write_csv(rep / f"metrics_{led.run_id}.csv", METRIC_FIELDS, rows)
        b = breakthroughs(rows).get(led.run_id, {})
        summary[led.run_id] = b
        write_json(rep / f"metrics_{led.run_id}.json", {"run_id": led.run_id, "seed": led.seed,
                                                         "config_hash": led.config_hash, "breakthroughs": b})
    return summary


# ---------------------------------------------------------------------------
# ablation and PPP


def _reading_inputs(corpus):
    table = load_reading_table(corpus.path)
    freq = load_frequencies(corpus.freq)
    return table, freq


def _dll(model, vocab, table, freq, mode, ablation=None):
    s = word_surprisals(model, vocab, table.item_words(), ablation=ablation)
    feats = align_word_features(table, s, freq, mode)
    return delta_ll(feats, RegressionSpec(mode))


def _pick_checkpoint(led: RunLedger, tokens: int | None) -> dict:
    if not led.checkpoints:
        raise PlanError(f"run {led.run_id} has no checkpoints")
    if tokens is None:
        return led.checkpoints[-1]
    for c in led.checkpoints:
        if c["tokens"] == tokens:
            return c
    raise PlanError(f"run {led.run_id} has no checkpoint at {tokens} tokens")


def cmd_ablate(plan: ExperimentPlan, out, run_id: str, checkpoint: int | None = None,
               corpora: Sequence[str] | None = None) -> dict:
    (led,) = completed_runs(plan, out, [run_id]) or [None]
    if led is None:
        raise PlanError(f"run {run_id} is not complete")
    ck = _pick_checkpoint(led, checkpoint)
    model = _load(out, led, ck, plan)
    cfg = model.config
    data = load_corpus(plan)
    sentences = _probe_sentences(plan, data)
    ps = ps_per_head(model, plan)
    sas = head_sas_score(sentence_word_attentions(model, data.vocab, sentences), sentences)[0] if sentences else None
    rep = _reports(out)
    results = {}
    for corpus in plan.reading:
        if corpora and corpus.name not in corpora:
            continue
        table, freq = _reading_inputs(corpus)
        base = _dll(model, data.vocab, table, freq, corpus.mode)
        grid = []
        for l in range(cfg.n_layer):
            for h in range(cfg.n_head):
                abl = _dll(model, data.vocab, table, freq, corpus.mode,
                           AblationSpec(frozenset({(l, h)}), "pattern_preserving"))
                ddll, _ = delta_delta_ll(base, abl)
                grid.append([l, h, float(ps[l, h]), None if sas is None else float(sas[l, h]), ddll, corpus.name])
        write_csv(rep / f"ablate_{run_id}_{corpus.name}.csv", GRID_FIELDS, grid)
        d = np.array([g[4] for g in grid])
        corr = {}
        for name, col in (("ps", 2), ("sas_score", 3)):
            xs = [g[col] for g in grid]
            try:
                r, p = pearson_r(xs, d) if None not in xs else (None, None)
            except StatsError:
                r, p = None, None
            corr[name] = {"r": _num(r), "p": _num(p)}
        res = {"run_id": run_id, "seed": led.seed, "checkpoint_tokens": ck["tokens"], "corpus": corpus.name,
               "baseline_delta_ll": base.value, "n_words": len(base.keys), "n_heads": len(grid),
               "pearson_ddll": corr}
        write_json(rep / f"ablate_{run_id}_{corpus.name}.json", res)
        results[corpus.name] = res
    return results


def cmd_ppp(plan: ExperimentPlan, out, run_ids=None) -> dict:
    data = load_corpus(plan)
    ledgers = completed_runs(plan, out, run_ids)
    rep = _reports(out)
    traj_rows = []
    summary: dict = {"runs": {}, "permutation_tests": []}
    final_contrib: dict = {}
    cells = {c.run_id: c for c in plan.cells()}
    for led in ledgers:
        mfile = rep / f"metrics_{led.run_id}.json"
        bt = None
        if mfile.exists():
            b = json.loads(mfile.read_text())["breakthroughs"].get("ps_max")
            bt = None if b is None else b["tokens_seen"]
        else:
            log.warning("%s: no metrics report; pre/post split unavailable", led.run_id)
        run_sum = {"seed": led.seed, "config_hash": led.config_hash, "breakthrough_tokens": bt, "corpora": {}}
        models = [(ck["tokens"], _load(out, led, ck, plan)) for ck in led.checkpoints]
        windows = val_windows(plan, data, models[0][1].config.context_size) if models else None
        losses = {}
        for tokens, model in models:
            logits, _ = forward_with_trace(model, windows[:, :-1])
            losses[tokens] = float(T.cross_entropy(T.Tensor(logits), windows[:, 1:]).data)
        for corpus in plan.reading:
            try:
                table, freq = _reading_inputs(corpus)
                dlls = {t: _dll(m, data.vocab, table, freq, corpus.mode) for t, m in models}
            except (ValueError, OSError) as e:
                run_sum["corpora"][corpus.name] = {"skipped": f"{type(e).__name__}: {e}"}
                continue
            series = {t: d.value for t, d in dlls.items()}
            for t in sorted(series):
                traj_rows.append([led.run_id, corpus.name, t, series[t], series[t] / len(dlls[t].keys), losses[t]])
            tip = tipping_point(series)
            pre, post = pre_post_transition_correlation(losses, series, bt)
            run_sum["corpora"][corpus.name] = {
                "tipping_point": {"tokens_seen": tip[0], "delta_ll": tip[1]},
                "r_pre": None if pre is None else {"r": _num(pre[0]), "p": _num(pre[1])},
                "r_post": None if post is None else {"r": _num(post[0]), "p": _num(post[1])},
            }
            final_contrib[(led.run_id, corpus.name)] = dlls[max(dlls)]
        summary["runs"][led.run_id] = run_sum
    # regularized vs unregularized, same model and seed, final checkpoints
    done = {l.run_id for l in ledgers}
    for rid in sorted(done):
        c = cells.get(rid)
        if c is None or c.reg.kind == "none":
            continue
        ref = next((o.run_id for o in cells.values() if o.model.name == c.model.name and o.reg.kind == "none"), None)
        if ref is None or ref not in done:
            continue
        for corpus in plan.reading:
            a, b = final_contrib.get((rid, corpus.name)), final_contrib.get((ref, corpus.name))
            if a is None or b is None:
                continue
            p = permutation_test(a, b, n_perm=plan.probe.n_perm, seed=plan.seed)
            summary["permutation_tests"].append({"run": rid, "reference": ref, "corpus": corpus.name,
                                                 "delta_ll": a.value, "reference_delta_ll": b.value, "p": p})
    write_csv(rep / "ppp_trajectory.csv", ["run_id", "corpus", "tokens_seen", "delta_ll", "delta_ll_per_word",
                                           "val_loss"], traj_rows)
    write_json(rep / "ppp_summary.json", summary)
    return summary
