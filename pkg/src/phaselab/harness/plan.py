"""Experiment plans, run identities and the per-run ledger."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from phaselab.data.reading import SPILLOVER
from phaselab.data.synthetic import SyntheticSpec
from phaselab.data.tokenizer import Vocab
from phaselab.model import ModelConfig
from phaselab.training import RegularizerSpec, TrainConfig

KNOWN_METRICS = ("ps", "uas", "sas", "icl", "val_loss")


class PlanError(ValueError):
    pass


def config_hash(obj) -> str:
    """sha256 of canonical JSON; key order does not matter."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def corpus_vocab(path) -> Vocab:
    """Word-level vocabulary of a one-document-per-line corpus (no byte fallback)."""
    return Vocab.build(Path(path).read_text(encoding="utf-8").splitlines(), byte_fallback=False)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ModelEntry:
    name: str
    config: ModelConfig


@dataclass(frozen=True)
class ReadingCorpus:
    name: str
    path: Path
    freq: Path
    mode: str = "eye_tracking"


@dataclass
class ProbeSettings:
    ps_period: int = 28
    ps_sequences: int = 16
    uas_sentences: int = 100
    icl_windows: int = 16
    n_perm: int = 10_000


@dataclass
class ExperimentPlan:
    root: Path
    corpus: Path
    conllu: Path | None
    reading: list[ReadingCorpus]
    models: list[ModelEntry]
    regularizers: list[RegularizerSpec]
    train: TrainConfig
    checkpoint_scale: float = 1.0
    metrics: list[str] = field(default_factory=lambda: list(KNOWN_METRICS))
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    seed: int = 0
    name: str = "plan"

    @classmethod
    def load(cls, path) -> ExperimentPlan:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise PlanError(f"cannot read plan {path}: {e}") from None
        return cls.from_dict(d, path.parent)

    @classmethod
    def from_dict(cls, d: dict, root) -> ExperimentPlan:
        root = Path(root)

        def p(rel, what):
            if rel is None:
                return None
            q = root / rel
            if not q.exists():
                raise PlanError(f"{what} not found: {q}")
            return q

        try:
            corpus = p(d["corpus"], "training corpus")
            conllu = p(d.get("conllu"), "CoNLL-U file")
            reading = []
            for r in d.get("reading", []):
                mode = r.get("mode", "eye_tracking")
                if mode not in SPILLOVER:
                    raise PlanError(f"reading corpus {r.get('name')!r}: unknown mode {mode!r}")
                reading.append(ReadingCorpus(r["name"], p(r["path"], "reading table"), p(r["freq"], "frequency table"),
                                             mode))
            models = []
            for m in d["models"]:
                m = dict(m)
                if not m.get("vocab_size"):
                    m["vocab_size"] = len(corpus_vocab(corpus))
                models.append(ModelEntry(m.pop("name"), ModelConfig(**m)))
            regs = [RegularizerSpec.from_dict(r) for r in d.get("regularizers", [{"kind": "none"}])]
            train = TrainConfig.from_dict(d.get("train", {}))
            metrics = list(d.get("metrics", KNOWN_METRICS))
            probe = ProbeSettings(**d.get("probe", {}))
        except KeyError as e:
            raise PlanError(f"plan is missing field {e}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, PlanError):
                raise
            raise PlanError(f"invalid plan: {e}") from None
        unknown = set(metrics) - set(KNOWN_METRICS)
        if unknown:
            raise PlanError(f"unknown metrics {sorted(unknown)}")
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise PlanError("model names must be unique")
        if len({r.name for r in reading}) != len(reading):
            raise PlanError("reading corpus names must be unique")
        scale = float(d.get("checkpoint_scale", 1.0))
        if not (math.isfinite(scale) and scale > 0):
            raise PlanError("checkpoint_scale must be finite and > 0")
        for r in regs:
            if r.kind == "sas" and conllu is None:
                raise PlanError("SAS regularization needs a CoNLL-U file")
        return cls(root, corpus, conllu, reading, models, regs, train, scale, metrics, probe,
                   int(d.get("seed", 0)), str(d.get("name", "plan")))

    def with_overrides(self, *, seed=None, scale=None, precision=None) -> ExperimentPlan:
        plan = dataclasses.replace(self)
        if seed is not None:
            plan.seed = int(seed)
        if scale is not None:
            if not (math.isfinite(scale) and scale > 0):
                raise PlanError("--scale must be finite and > 0")
            plan.checkpoint_scale = float(scale)
        if precision is not None:
            plan.train = dataclasses.replace(plan.train, precision=precision)
        return plan

    def cells(self) -> list[RunCell]:
        return [RunCell(m, r, self) for m in self.models for r in self.regularizers]


@dataclass
class RunCell:
    model: ModelEntry
    reg: RegularizerSpec
    plan: ExperimentPlan

    @property
    def run_id(self) -> str:
        return f"{self.model.name}_{self.reg.label()}_s{self.plan.seed}"

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.plan.train, seed=self.plan.seed, checkpoint_scale=self.plan.checkpoint_scale)

    @property
    def synthetic(self) -> SyntheticSpec | None:
        return self.reg.synthetic

    def identity(self) -> dict:
        return {
            "model": self.model.config.to_dict(),
            "regularizer": self.reg.to_dict(),
            "train": self.train_config.to_dict(),
            "corpus": file_digest(self.plan.corpus),
            "conllu": file_digest(self.plan.conllu) if self.plan.conllu else None,
        }

    @property
    def config_hash(self) -> str:
        return config_hash(self.identity())


@dataclass
class RunLedger:
    run_id: str
    seed: int
    config_hash: str
    checkpoints: list[dict] = field(default_factory=list)  # {"tokens": int, "path": relative str}
    status: str = "pending"
    error: str | None = None

    FILE = "ledger.json"

    def save(self, run_dir) -> None:
        run_dir = Path(run_dir)
        tmp = run_dir / (self.FILE + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, run_dir / self.FILE)

    @classmethod
    def load(cls, run_dir) -> RunLedger | None:
        f = Path(run_dir) / cls.FILE
        if not f.exists():
            return None
        return cls(**json.loads(f.read_text()))

    @property
    def complete(self) -> bool:
        return self.status == "complete"
