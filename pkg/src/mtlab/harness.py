"""Experiment orchestration, Table-2-style reports and the command line.

Protocol
--------
Phase A trains every strategy on every evaluated pair without the dev
split and scores dev.  Phase B retrains with dev folded into the training
data and scores test, either for every submitted strategy (``full-grid``,
the default) or only for the strategy with the best mean dev score per
pair (``per-pair``; ties go to the strategy declared first).

Every trained model is a node in ``<out>/nodes/<kind>-<hash>/`` where the
hash covers the node's configuration, its input corpora and its parent
node, so shared stages (bases, the intermediate model) are trained once
and a rerun of a finished experiment trains nothing.

Plan files
----------
Blank-line separated ``key=value`` blocks.  The first block (``kind =
experiment``) holds global settings; ``kind = base`` and ``kind =
strategy`` blocks follow::

    kind = experiment
    corpora = replica
    pairs = quy,aym
    seeds = 0,1
    mode = full-grid
    submit = M2,M3
    model.d_model = 64
    baseline.quy = 34.3

    kind = base
    name = multi-a
    type = multilingual
    pairs = en,pt
    epochs = 3

    kind = strategy
    name = M2
    type = intermediate
    base = multi-a
    stage1.epochs = 5

``corpora`` is ``replica`` or a manifest path relative to the plan;
``pairs`` defaults to every pair no base uses; ``submit`` lists the
strategies scored on test in full-grid mode (default: all); ``baseline.*``
adds a reference row to the test section.  Base ``type`` is
``multilingual`` or ``bilingual``; strategy ``type`` is ``direct``,
``intermediate``, ``bilingual`` or ``scratch``.  Un-prefixed training keys
apply to every stage, ``stage1.``/``stage2.`` keys to one stage.

Training keys are the fields of :class:`~mtlab.training.TrainConfig`; a
stage's effective seed is its configured seed plus the run seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import ROUND_DOWN, ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from . import kvfile
from .corpus import (
    REPLICA_TABLE,
    CorpusError,
    ParallelCorpus,
    make_pretraining_suite,
    make_shared_task_replica,
    read_manifest,
    save_corpus,
    stats,
    table1_manifest,
    write_manifest,
)
from .metrics import ChrFConfig, chrf_corpus
from .model import ModelConfig
from .tokenizer import Vocab
from .training import (
    STRATEGY_KINDS,
    Strategy,
    TrainConfig,
    TranslationModel,
    build_intermediate,
    build_vocab,
    evaluate,
    finetune_direct,
    pretrain_base,
    train_from_scratch,
)

__all__ = [
    "BaseSpec",
    "ExperimentPlan",
    "ExperimentResult",
    "PlanError",
    "run_experiment",
    "load_result",
    "render_report",
    "parse_report_csv",
    "replica_plan",
    "cli_main",
    "main",
]

log = logging.getLogger(__name__)

MODES = ("full-grid", "per-pair")
FORMATS = ("text-table", "csv")
ROUNDING = ("round", "truncate")
BASELINE_LABEL = "Baseline"


class PlanError(ValueError):
    pass


# --- plans ------------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseSpec:
    """A pretrained stand-in for a public checkpoint."""

    name: str
    kind: str
    pairs: tuple[str, ...]
    config: TrainConfig

    def __post_init__(self):
        if self.kind not in ("multilingual", "bilingual"):
            raise PlanError(f"base {self.name!r}: type must be multilingual or bilingual")
        want_ok = len(self.pairs) == 1 if self.kind == "bilingual" else len(self.pairs) >= 2
        if not want_ok:
            raise PlanError(f"base {self.name!r}: {self.kind} base cannot use {len(self.pairs)} pair(s)")


@dataclass(frozen=True)
class ExperimentPlan:
    bases: tuple[BaseSpec, ...]
    strategies: tuple[Strategy, ...]
    corpora: str = "replica"
    data_seed: int = 0
    scale: float = 1.0
    pairs: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    mode: str = "full-grid"
    submit: tuple[str, ...] = ()
    vocab_size: int = 512
    model: ModelConfig = ModelConfig()
    chrf: ChrFConfig = ChrFConfig()
    baseline: tuple[tuple[str, float], ...] = ()
    root: str = "."

    def __post_init__(self):
        if self.mode not in MODES:
            raise PlanError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.strategies:
            raise PlanError("plan declares no strategies")
        if not self.seeds:
            raise PlanError("plan declares no seeds")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise PlanError(f"duplicate strategy names: {names}")
        base_names = [b.name for b in self.bases]
        if len(set(base_names)) != len(base_names):
            raise PlanError(f"duplicate base names: {base_names}")
        for s in self.strategies:
            if s.kind != "scratch" and s.base not in base_names:
                raise PlanError(f"strategy {s.name!r} references unknown base {s.base!r}")
            if s.kind == "bilingual" and self.base(s.base).kind != "bilingual":
                raise PlanError(f"strategy {s.name!r} is bilingual but base {s.base!r} is not")
        for name in self.submit:
            if name not in names:
                raise PlanError(f"submit lists unknown strategy {name!r}")
        self.model.validate()

    def base(self, name: str) -> BaseSpec:
        for b in self.bases:
            if b.name == name:
                return b
        raise PlanError(f"unknown base {name!r}")

    @property
    def submitted(self) -> tuple[str, ...]:
        return self.submit or tuple(s.name for s in self.strategies)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentPlan":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path), str(path.parent))

    @classmethod
    def from_text(cls, text: str, source: str = "<plan>", root: str = ".",
                  overrides: dict[str, str] | None = None) -> "ExperimentPlan":
        blocks = kvfile.parse_blocks(text, source)
        settings: dict[str, str] = {}
        bases, strategies = [], []
        for i, block in enumerate(blocks):
            kind = block.get("kind", "experiment" if i == 0 else "")
            body = {k: v for k, v in block.items() if k != "kind"}
            try:
                if kind == "experiment":
                    if settings:
                        raise PlanError("more than one experiment block")
                    settings = body or {"corpora": "replica"}
                elif kind == "base":
                    bases.append(_base_from_block(body))
                elif kind == "strategy":
                    strategies.append(_strategy_from_block(body))
                else:
                    raise PlanError(f"unknown block kind {kind!r}")
            except (ValueError, KeyError) as exc:
                raise PlanError(f"{source}: block {i + 1}: {exc}") from None
        settings.update(overrides or {})
        return cls._with_settings(settings, tuple(bases), tuple(strategies), root, source)

    @classmethod
    def _with_settings(cls, s: dict[str, str], bases, strategies, root, source) -> "ExperimentPlan":
        simple = {"corpora", "data_seed", "scale", "pairs", "seeds", "mode", "submit",
                  "vocab_size", "chrf.order", "chrf.beta"}
        bad = [k for k in s if k not in simple and not k.startswith(("model.", "baseline."))]
        if bad:
            raise PlanError(f"{source}: unknown experiment keys {sorted(bad)}")
        model_kw = {k[6:]: v for k, v in s.items() if k.startswith("model.")}
        try:
            model = ModelConfig(**_typed(ModelConfig, model_kw)).validate()
            return cls(
                bases=bases,
                strategies=strategies,
                corpora=s.get("corpora", "replica"),
                data_seed=int(s.get("data_seed", 0)),
                scale=float(s.get("scale", 1.0)),
                pairs=_codes(s.get("pairs", "")),
                seeds=tuple(int(x) for x in _codes(s.get("seeds", "0"))),
                mode=s.get("mode", "full-grid"),
                submit=_codes(s.get("submit", "")),
                vocab_size=int(s.get("vocab_size", 512)),
                model=model,
                chrf=ChrFConfig(order=int(s.get("chrf.order", 6)), beta=float(s.get("chrf.beta", 2.0))),
                baseline=tuple((k[9:], float(v)) for k, v in s.items() if k.startswith("baseline.")),
                root=root,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, PlanError):
                raise
            raise PlanError(f"{source}: {exc}") from None

    def describe(self) -> dict[str, str]:
        """Every setting as flat ``key -> value`` text, in a fixed order."""
        out = {
            "plan.corpora": self.corpora,
            "plan.data_seed": str(self.data_seed),
            "plan.scale": repr(self.scale),
            "plan.pairs": ",".join(self.pairs),
            "plan.seeds": ",".join(map(str, self.seeds)),
            "plan.mode": self.mode,
            "plan.submit": ",".join(self.submitted),
            "plan.vocab_size": str(self.vocab_size),
            "chrf.order": str(self.chrf.order),
            "chrf.beta": repr(self.chrf.beta),
            "chrf.remove_whitespace": str(self.chrf.remove_whitespace),
        }
        # the vocabulary size comes from the trained tokenizer, not the model block
        out.update({f"model.{k}": str(v) for k, v in asdict(self.model).items()
                    if k != "vocab_size"})
        for b in self.bases:
            out[f"base.{b.name}.type"] = b.kind
            out[f"base.{b.name}.pairs"] = ",".join(b.pairs)
            out.update({f"base.{b.name}.{k}": str(v) for k, v in b.config.to_kv().items()})
        # include_dev is set by the protocol phase, so stages list the rest
        for s in self.strategies:
            out[f"strategy.{s.name}.type"] = s.kind
            out[f"strategy.{s.name}.base"] = s.base or "-"
            for i, cfg in enumerate(s.stages, start=1):
                out.update({f"strategy.{s.name}.stage{i}.{k}": str(v)
                            for k, v in cfg.to_kv().items() if k != "include_dev"})
        return out


def _codes(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _typed(cls, values: dict[str, str]) -> dict[str, object]:
    types = {f.name: f.type for f in fields(cls)}
    out: dict[str, object] = {}
    for k, v in values.items():
        if k not in types:
            raise PlanError(f"unknown {cls.__name__} key {k!r}")
        t = types[k]
        out[k] = (kvfile.as_bool(v) if t in ("bool", bool) else int(v) if t in ("int", int)
                  else float(v))
    return out


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _check_train_keys(keys, where: str) -> None:
    bad = sorted(k for k in keys if k not in _TRAIN_KEYS)
    if bad:
        raise PlanError(f"{where}: unknown training keys {bad}")


def _base_from_block(body: dict[str, str]) -> BaseSpec:
    name, kind, pairs = body.pop("name", ""), body.pop("type", ""), body.pop("pairs", "")
    if not name:
        raise PlanError("base block without name")
    _check_train_keys(body, f"base {name!r}")
    return BaseSpec(name, kind, _codes(pairs), TrainConfig.from_kv(body))


def _strategy_from_block(body: dict[str, str]) -> Strategy:
    name, kind, base = body.pop("name", ""), body.pop("type", ""), body.pop("base", "") or None
    if not name:
        raise PlanError("strategy block without name")
    if kind not in STRATEGY_KINDS:
        raise PlanError(f"strategy {name!r}: type must be one of {STRATEGY_KINDS}")
    n = 2 if kind == "intermediate" else 1
    shared = {k: v for k, v in body.items() if not k.startswith("stage")}
    _check_train_keys(shared, f"strategy {name!r}")
    stages = []
    for i in range(1, n + 1):
        prefix = f"stage{i}."
        own = {k[len(prefix):]: v for k, v in body.items() if k.startswith(prefix)}
        _check_train_keys(own, f"strategy {name!r} stage {i}")
        stages.append(TrainConfig.from_kv({**shared, **own}))
    stray = [k for k in body if k.startswith("stage") and not k.startswith(
        tuple(f"stage{i}." for i in range(1, n + 1)))]
    if stray:
        raise PlanError(f"strategy {name!r}: keys for missing stages {sorted(stray)}")
    return Strategy(name, kind, base, tuple(stages))


def replica_plan(name: str = "replica") -> ExperimentPlan:
    """Packaged plans: ``replica`` (full scale) or ``replica-smoke`` (seconds)."""
    text = resources.files("mtlab.data").joinpath(f"{name}.plan").read_text(encoding="utf-8")
    return ExperimentPlan.from_text(text, f"{name}.plan")


# --- results ----------------------------------------------------------------------------

Cell = tuple[str, str, str]  # (strategy, pair, split)


@dataclass
class ExperimentResult:
    """Scores keyed by (strategy, pair, split), averaged over run seeds."""

    strategies: tuple[str, ...]
    pairs: tuple[str, ...]
    scores: dict[Cell, float]
    seed_scores: dict[tuple[str, str, str, int], float] = field(default_factory=dict)
    failed: dict[Cell, str] = field(default_factory=dict)
    checkpoints: dict[tuple[str, str, str, int], str] = field(default_factory=dict)
    baseline: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    steps_run: int = 0

    def average(self, strategy: str, split: str) -> tuple[float | None, bool]:
        """Mean over the pairs with a score, and whether any pair was missing."""
        vals = [self.scores[(strategy, p, split)] for p in self.pairs
                if (strategy, p, split) in self.scores]
        if not vals:
            return None, True
        return math.fsum(vals) / len(vals), len(vals) < len(self.pairs)

    def rows(self, split: str) -> list[str]:
        return [s for s in self.strategies if any((s, p, split) in self.scores for p in self.pairs)]


def _mean_scores(seed_scores: dict[tuple[str, str, str, int], float]) -> dict[Cell, float]:
    grouped: dict[Cell, list[float]] = {}
    for (s, p, split, _), v in seed_scores.items():
        grouped.setdefault((s, p, split), []).append(v)
    return {k: math.fsum(v) / len(v) for k, v in grouped.items()}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_result(result: ExperimentResult, path: str | Path) -> None:
    head = {"kind": "experiment", "strategies": ",".join(result.strategies),
            "pairs": ",".join(result.pairs), "wall_time": f"{result.wall_time:.3f}",
            "steps_run": result.steps_run}
    head.update({f"meta.{k}": v for k, v in result.metadata.items()})
    blocks = [head]
    if result.baseline:
        blocks.append({"kind": "baseline", **{p: repr(v) for p, v in result.baseline.items()}})
    for (s, p, split, seed), v in result.seed_scores.items():
        blocks.append({"kind": "score", "strategy": s, "pair": p, "split": split, "seed": seed,
                       "score": repr(v), "checkpoint": result.checkpoints.get((s, p, split, seed), "")})
    for (s, p, split), msg in result.failed.items():
        blocks.append({"kind": "failed", "strategy": s, "pair": p, "split": split, "error": msg})
    _atomic_write(Path(path), "\n".join(kvfile.dumps(b) for b in blocks))


def load_result(path: str | Path) -> ExperimentResult:
    """Read ``results.txt`` (or the experiment directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.txt"
    if not path.exists():
        raise FileNotFoundError(f"no experiment results at {path}")
    blocks = kvfile.read_blocks(path)
    if not blocks or blocks[0].get("kind") != "experiment":
        raise kvfile.FormatError(f"{path}: not an experiment result file")
    head = blocks[0]
    result = ExperimentResult(_codes(head["strategies"]), _codes(head["pairs"]), {},
                              wall_time=float(head.get("wall_time", 0)),
                              steps_run=int(head.get("steps_run", 0)),
                              metadata={k[5:]: v for k, v in head.items() if k.startswith("meta.")})
    for b in blocks[1:]:
        kind = b.get("kind")
        if kind == "baseline":
            result.baseline = {p: float(v) for p, v in b.items() if p != "kind"}
        elif kind == "score":
            key = (b["strategy"], b["pair"], b["split"], int(b["seed"]))
            result.seed_scores[key] = float(b["score"])
            result.checkpoints[key] = b.get("checkpoint", "")
        elif kind == "failed":
            result.failed[(b["strategy"], b["pair"], b["split"])] = b["error"]
    result.scores = _mean_scores(result.seed_scores)
    return result


# --- node store -------------------------------------------------------------------------


def _digest(*parts: object) -> str:
    h = hashlib.blake2b(digest_size=10)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def corpus_hash(corpus: ParallelCorpus) -> str:
    h = hashlib.blake2b(digest_size=10)
    h.update(corpus.pair_id.encode("utf-8"))
    for s, t, split in corpus.rows():
        h.update(f"\x00{split}\x01{s}\x01{t}".encode("utf-8"))
    return h.hexdigest()


class _Failure(RuntimeError):
    pass


class _Store:
    """Finished nodes live in ``nodes/<key>/`` with a ``complete`` marker."""

    def __init__(self, root: Path):
        self.root = root / "nodes"
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / key

    def has(self, key: str) -> bool:
        return (self.path(key) / "complete").exists()

    def commit(self, key: str, write: Callable[[Path], None]) -> None:
        tmp = self.root / f".tmp-{key}"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        write(tmp)
        (tmp / "complete").write_text("", encoding="utf-8")
        final = self.path(key)
        shutil.rmtree(final, ignore_errors=True)
        os.replace(tmp, final)


class _Runner:
    def __init__(self, plan: ExperimentPlan, out: Path, pool: dict[str, ParallelCorpus]):
        self.plan, self.out, self.pool = plan, out, pool
        self.store = _Store(out)
        self.hashes = {code: corpus_hash(c) for code, c in pool.items()}
        self.models: dict[str, TranslationModel] = {}
        self.errors: dict[str, str] = {}
        self.steps = 0
        self._vocab: Vocab | None = None

    # keys -------------------------------------------------------------------------------

    @property
    def vocab_key(self) -> str:
        codes = tuple(self.pool)
        return "vocab-" + _digest("vocab", self.plan.vocab_size, codes,
                                  tuple(self.hashes[c] for c in codes))

    def base_key(self, spec: BaseSpec, seed: int) -> str:
        cfg = spec.config.replace(seed=spec.config.seed + seed)
        return "base-" + _digest("base", spec.kind, tuple(self.hashes[p] for p in spec.pairs),
                                 cfg.to_kv(), asdict(self.plan.model), self.vocab_key)

    def inter_key(self, strategy: Strategy, seed: int, include_dev: bool) -> str:
        cfg = self._stage(strategy.stages[0], seed, include_dev)
        return "inter-" + _digest("inter", self.base_key(self.plan.base(strategy.base), seed),
                                  cfg.to_kv(), tuple(self.hashes[p] for p in self.plan.pairs))

    def cell_key(self, strategy: Strategy, pair: str, seed: int, include_dev: bool) -> str:
        cfg = self._stage(strategy.final_stage, seed, include_dev)
        if strategy.kind == "scratch":
            parent = _digest(self.vocab_key, asdict(self.plan.model))
        elif strategy.kind == "intermediate":
            parent = self.inter_key(strategy, seed, include_dev)
        else:
            parent = self.base_key(self.plan.base(strategy.base), seed)
        kind = "scratch" if strategy.kind == "scratch" else "ft"
        return f"{kind}-" + _digest(kind, parent, cfg.to_kv(), self.hashes[pair])

    @staticmethod
    def _stage(cfg: TrainConfig, seed: int, include_dev: bool) -> TrainConfig:
        return cfg.replace(seed=cfg.seed + seed, include_dev=include_dev)

    # materialisation --------------------------------------------------------------------

    def vocab(self) -> Vocab:
        if self._vocab is None:
            key = self.vocab_key
            if not self.store.has(key):
                vocab = build_vocab(list(self.pool.values()), self.plan.vocab_size)
                self.store.commit(key, lambda d: vocab.save(d / "vocab.bpe"))
            self._vocab = Vocab.load(self.store.path(key) / "vocab.bpe")
        return self._vocab

    def _model(self, key: str, kind: str, build: Callable[[], TranslationModel],
               keep: bool) -> TranslationModel:
        if key in self.models:
            return self.models[key]
        if key in self.errors:
            raise _Failure(self.errors[key])
        if not self.store.has(key):
            try:
                model = build()
            except _Failure:
                raise
            except Exception as exc:  # recorded per node so dependants fail fast
                self.errors[key] = f"{type(exc).__name__}: {exc}"
                raise _Failure(self.errors[key]) from exc
            result = model.history[-1]
            self.steps += result.steps
            meta = {"kind": kind, "steps": result.steps, "examples": result.examples,
                    "dropped": result.dropped,
                    "losses": ",".join(repr(x) for x in result.losses)}
            self.store.commit(key, lambda d: (model.save(d),
                                              (d / "node.txt").write_text(kvfile.dumps(meta))))
        model = TranslationModel.load(self.store.path(key), key, kind)
        if keep:
            self.models[key] = model
        return model

    def node_meta(self, key: str) -> dict[str, str]:
        path = self.store.path(key) / "node.txt"
        return kvfile.read(path) if path.exists() else {}

    def base(self, spec: BaseSpec, seed: int) -> TranslationModel:
        cfg = spec.config.replace(seed=spec.config.seed + seed)
        corpora = [self.pool[p] for p in spec.pairs]
        return self._model(self.base_key(spec, seed), "base",
                           lambda: pretrain_base(spec.kind, corpora, cfg, self.plan.model,
                                                 self.vocab(), spec.name), keep=True)

    def intermediate(self, strategy: Strategy, seed: int, include_dev: bool) -> TranslationModel:
        cfg = self._stage(strategy.stages[0], seed, include_dev)
        pairs = [self.pool[p] for p in self.plan.pairs]
        return self._model(self.inter_key(strategy, seed, include_dev), "intermediate",
                           lambda: build_intermediate(self.base(self.plan.base(strategy.base), seed),
                                                      pairs, cfg), keep=True)

    def cell_model(self, strategy: Strategy, pair: str, seed: int,
                   include_dev: bool) -> TranslationModel:
        cfg = self._stage(strategy.final_stage, seed, include_dev)
        corpus = self.pool[pair]

        def build():
            if strategy.kind == "scratch":
                return train_from_scratch(self.vocab(), self.plan.model, corpus, cfg)
            if strategy.kind == "intermediate":
                parent = self.intermediate(strategy, seed, include_dev)
            else:
                parent = self.base(self.plan.base(strategy.base), seed)
            return finetune_direct(parent, corpus, cfg)

        key = self.cell_key(strategy, pair, seed, include_dev)
        return self._model(key, strategy.kind, build, keep=False)

    def score(self, strategy: Strategy, pair: str, split: str, seed: int) -> tuple[float, str]:
        include_dev = split == "test"
        key = self.cell_key(strategy, pair, seed, include_dev)
        path = self.store.path(key) / f"score.{split}"
        tag = f"order={self.plan.chrf.order} beta={self.plan.chrf.beta!r}"
        if self.store.has(key) and path.exists():
            saved = kvfile.read(path)
            if saved.get("chrf") == tag:
                return float(saved["score"]), key
        model = self.cell_model(strategy, pair, seed, include_dev)
        value, hyps = evaluate(model, self.pool[pair], split, self.plan.chrf)
        d = self.store.path(key)
        _atomic_write(d / f"hyp.{split}.txt", "".join(h + "\n" for h in hyps))
        _atomic_write(path, kvfile.dumps({"chrf": tag, "score": repr(value)}))
        return value, key


def _load_pool(plan: ExperimentPlan) -> dict[str, ParallelCorpus]:
    if plan.corpora == "replica":
        corpora = (make_shared_task_replica(plan.data_seed, plan.scale)
                   + make_pretraining_suite(plan.data_seed, plan.scale)[1:])
        return {c.target_code: c for c in corpora}
    path = Path(plan.corpora)
    if not path.is_absolute():
        path = Path(plan.root) / path
    pool = {}
    for entry in read_manifest(path):
        try:
            pool[entry.code] = entry.load()
        except CorpusError as exc:
            raise type(exc)(f"{entry.pair_id}: {exc}") from None
    return pool


def _resolve_pairs(plan: ExperimentPlan, pool: dict[str, ParallelCorpus]) -> ExperimentPlan:
    used = {p for b in plan.bases for p in b.pairs}
    for code in used | set(plan.pairs):
        if code not in pool:
            raise PlanError(f"plan uses pair {code!r} missing from the corpora")
    if plan.pairs:
        return plan
    if plan.corpora == "replica":
        pairs = tuple(code for code, *_ in REPLICA_TABLE[1:])
    else:
        pairs = tuple(c for c in pool if c not in used)
    if not pairs:
        raise PlanError("no pairs left to evaluate")
    return replace(plan, pairs=pairs)


def run_experiment(plan: ExperimentPlan, out: str | Path) -> ExperimentResult:
    """Run (or resume) both protocol phases and persist everything under ``out``.

    Writes ``results.txt``, ``report.txt``, ``report.csv``, ``stats.txt``,
    the corpora with their ``manifest.txt`` under ``data/`` and one node
    directory per trained model.
    """
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pool = _load_pool(plan)
    plan = _resolve_pairs(plan, pool)
    _write_data(pool, out / "data")
    runner = _Runner(plan, out, pool)

    seed_scores: dict[tuple[str, str, str, int], float] = {}
    checkpoints: dict[tuple[str, str, str, int], str] = {}
    failed: dict[Cell, str] = {}
    meta = plan.describe()

    def run_cell(strategy: Strategy, pair: str, split: str) -> None:
        for seed in plan.seeds:
            try:
                value, key = runner.score(strategy, pair, split, seed)
            except _Failure as exc:
                failed[(strategy.name, pair, split)] = str(exc)
                log.warning("cell %s/%s/%s failed: %s", strategy.name, pair, split, exc)
                return
            except Exception as exc:
                failed[(strategy.name, pair, split)] = f"{type(exc).__name__}: {exc}"
                log.warning("cell %s/%s/%s failed: %s", strategy.name, pair, split, exc)
                return
            seed_scores[(strategy.name, pair, split, seed)] = float(value)
            checkpoints[(strategy.name, pair, split, seed)] = f"nodes/{key}"

    # phase A: train without dev, score dev
    for strategy in plan.strategies:
        for pair in plan.pairs:
            run_cell(strategy, pair, "dev")

    # phase B: fold dev into training, score test
    by_name = {s.name: s for s in plan.strategies}
    if plan.mode == "full-grid":
        for name in plan.submitted:
            for pair in plan.pairs:
                run_cell(by_name[name], pair, "test")
    else:
        dev = _mean_scores(seed_scores)
        for pair in plan.pairs:
            best = None
            for s in plan.strategies:
                v = dev.get((s.name, pair, "dev"))
                if v is not None and (best is None or v > best[1]):
                    best = (s, v)
            meta[f"selected.{pair}"] = best[0].name if best else "-"
            if best:
                run_cell(best[0], pair, "test")

    dropped_total = 0
    for (s, p, split, seed), node in sorted(checkpoints.items()):
        dropped = int(runner.node_meta(node.split("/", 1)[1]).get("dropped", 0))
        dropped_total += dropped
        if dropped:
            meta[f"dropped.{s}.{p}.{split}.seed{seed}"] = str(dropped)
    meta["dropped.total"] = str(dropped_total)
    for (s, p, split), msg in failed.items():
        meta[f"failed.{s}.{p}.{split}"] = msg

    result = ExperimentResult(
        strategies=tuple(s.name for s in plan.strategies),
        pairs=plan.pairs,
        scores=_mean_scores(seed_scores),
        seed_scores=seed_scores,
        failed=failed,
        checkpoints=checkpoints,
        baseline=dict(plan.baseline),
        metadata=meta,
        wall_time=time.perf_counter() - t0,
        steps_run=runner.steps,
    )
    save_result(result, out / "results.txt")
    _atomic_write(out / "report.txt", render_report(result, "text-table"))
    _atomic_write(out / "report.csv", render_report(result, "csv"))
    _atomic_write(out / "stats.txt", stats(pool.values()).render())
    return result


def _write_data(pool: dict[str, ParallelCorpus], directory: Path) -> None:
    entries = []
    for code, corpus in pool.items():
        entry = save_corpus(corpus, directory / corpus.pair_id)
        entry.paths = {k: (str(Path(a).relative_to(directory)), str(Path(b).relative_to(directory)))
                       for k, (a, b) in entry.paths.items()}
        entries.append(entry)
    write_manifest(entries, directory / "manifest.txt")


# --- reports ----------------------------------------------------------------------------


def _fmt(value: float, rounding: str) -> str:
    mode = ROUND_DOWN if rounding == "truncate" else ROUND_HALF_EVEN
    # repr gives the shortest decimal that round-trips, so 21.17 stays 21.17
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=mode))


def render_report(result: ExperimentResult, format: str = "text-table",
                  rounding: str = "round") -> str:
    """Pair columns, one row per strategy, dev and test sections, Average column.

    Text tables mark the best strategy score per (pair, split) as ``**x**``
    and wrap it as ``__**x**__`` when it also beats the baseline row; missing cells are ``-``
    and an average taken over fewer than all pairs carries a ``*``.  CSV
    output keeps full precision so it reparses to the exact score map.
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    if rounding not in ROUNDING:
        raise ValueError(f"rounding must be one of {ROUNDING}, got {rounding!r}")
    if not result.scores and not result.baseline:
        raise ValueError("cannot render an empty result")
    if format == "csv":
        return _render_csv(result)
    return _render_text(result, rounding)


def _sections(result: ExperimentResult) -> list[str]:
    return [s for s in ("dev", "test") if result.rows(s) or (s == "test" and result.baseline)]


def _render_text(result: ExperimentResult, rounding: str) -> str:
    header = ["Split", "Model", *result.pairs, "Average"]
    table: list[list[str]] = []
    for split in _sections(result):
        rows = result.rows(split)
        best: dict[str, float] = {}
        for p in result.pairs:
            vals = [result.scores[(s, p, split)] for s in rows if (s, p, split) in result.scores]
            if vals:
                best[p] = max(vals)
        avgs = {s: result.average(s, split) for s in rows}
        present = [a for a, _ in avgs.values() if a is not None]
        best_avg = max(present) if present else None
        first = True
        if split == "test" and result.baseline:
            base_cells = [_fmt(result.baseline[p], rounding) if p in result.baseline else "-"
                          for p in result.pairs]
            vals = [result.baseline[p] for p in result.pairs if p in result.baseline]
            avg = _fmt(math.fsum(vals) / len(vals), rounding) if vals else "-"
            if vals and len(vals) < len(result.pairs):
                avg += "*"
            table.append([split.capitalize(), BASELINE_LABEL, *base_cells, avg])
            first = False
        for s in rows:
            cells = []
            for p in result.pairs:
                v = result.scores.get((s, p, split))
                if v is None:
                    cells.append("-")
                    continue
                text = _fmt(v, rounding)
                if v == best[p]:
                    text = f"**{text}**"
                    if split == "test" and p in result.baseline and v > result.baseline[p]:
                        text = f"__{text}__"
                cells.append(text)
            avg, partial = avgs[s]
            if avg is None:
                avg_text = "-"
            else:
                avg_text = _fmt(avg, rounding)
                if avg == best_avg:
                    avg_text = f"**{avg_text}**"
                if partial:
                    avg_text += "*"
            table.append([split.capitalize() if first else "", s, *cells, avg_text])
            first = False
    widths = [max(len(r[i]) for r in [header, *table]) for i in range(len(header))]

    def line(row):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                         for i, (c, w) in enumerate(zip(row, widths))).rstrip()

    lines = ["chrF2 scores", "", line(header), line(["-" * w for w in widths])]
    prev = None
    for row in table:
        if row[0] and prev is not None:
            lines.append(line(["-" * w for w in widths]))
        lines.append(line(row))
        prev = row
    lines += [
        "",
        "**x** best strategy for the pair and split; __**x**__ best and above the baseline;",
        "- no score; * average over the pairs that have a score.",
    ]
    if result.metadata:
        lines += ["", "Metadata", ""]
        lines += [f"{k}={v}" for k, v in result.metadata.items()]
    return "\n".join(lines) + "\n"


def _render_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "model", *result.pairs, "average"])
    for split in _sections(result):
        if split == "test" and result.baseline:
            vals = [result.baseline[p] for p in result.pairs if p in result.baseline]
            w.writerow([split, BASELINE_LABEL,
                        *[repr(result.baseline[p]) if p in result.baseline else "-"
                          for p in result.pairs],
                        repr(math.fsum(vals) / len(vals)) if vals else "-"])
        for s in result.rows(split):
            avg, _ = result.average(s, split)
            w.writerow([split, s, *[repr(result.scores[(s, p, split)])
                                    if (s, p, split) in result.scores else "-"
                                    for p in result.pairs],
                        repr(avg) if avg is not None else "-"])
    return buf.getvalue()


def parse_report_csv(text: str) -> tuple[dict[Cell, float], dict[str, float]]:
    """Inverse of the CSV report: (score map, baseline row)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:2] != ["split", "model"] or header[-1] != "average":
        raise ValueError("not a score report CSV")
    pairs = header[2:-1]
    scores: dict[Cell, float] = {}
    baseline: dict[str, float] = {}
    for row in reader:
        split, model, cells = row[0], row[1], row[2:-1]
        for p, c in zip(pairs, cells):
            if c == "-":
                continue
            if model == BASELINE_LABEL:
                baseline[p] = float(c)
            else:
                scores[(model, p, split)] = float(c)
    return scores, baseline


# --- command line -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one usage block, exit status 2
        self.print_usage(sys.stderr)
        self.exit(2, f"error: usage: {message}\n")


def _common(p: argparse.ArgumentParser, out_default: str | None) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--config", help="key=value file with defaults for any option")
    p.add_argument("--out", default=out_default, help="output path")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtlab", description="Low-resource NMT transfer experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="write the synthetic replica corpora and manifest")
    _common(p, "data")
    p.add_argument("--scale", type=float, default=1.0)

    p = sub.add_parser("pretrain", help="train a base model on high-resource pairs")
    _common(p, "base-model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs", required=True, help="comma-separated target codes")
    p.add_argument("--kind", choices=("multilingual", "bilingual"))
    p.add_argument("--vocab-size", type=int, default=512)

    p = sub.add_parser("finetune", help="fine-tune a model on one pair (or several: intermediate)")
    _common(p, "model")
    p.add_argument("--model", required=True, help="model directory (base or intermediate)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pair", required=True, help="target code; several codes build an intermediate")
    p.add_argument("--include-dev", action="store_true")
    p.add_argument("--scratch", action="store_true", help="random init, reuse only the vocabulary")

    p = sub.add_parser("evaluate", help="chrF2 of hypothesis/reference files or of a model")
    _common(p, None)
    p.add_argument("--hyp")
    p.add_argument("--ref")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--pair")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.add_argument("--order", type=int, default=6)
    p.add_argument("--beta", type=float, default=2.0)

    p = sub.add_parser("experiment", help="run a plan (both protocol phases, resumable)")
    _common(p, "mtlab-out")
    p.add_argument("--plan", default="replica",
                   help="plan file, or a packaged plan name: replica, replica-smoke")

    p = sub.add_parser("report", help="render the score table of a finished experiment")
    _common(p, None)
    p.add_argument("--experiment", default="mtlab-out")
    p.add_argument("--format", choices=FORMATS, default="text-table")
    p.add_argument("--rounding", choices=ROUNDING, default="round")

    p = sub.add_parser("stats", help="train/dev/test sentence counts per pair")
    _common(p, None)
    p.add_argument("--manifest", help="manifest file (default: packaged shared-task sizes)")
    p.add_argument("--format", choices=FORMATS, default="text-table")
    return parser


def _parse(argv: Sequence[str]) -> tuple[argparse.Namespace, dict[str, str]]:
    """Parse twice: ``--config`` values become defaults that flags override."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args, {}
    values = kvfile.read(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    known = {k.replace("-", "_"): v for k, v in values.items() if k.replace("-", "_") in dests}
    defaults = {}
    for action in sub._actions:
        if action.dest in known:
            raw = known[action.dest]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[action.dest] = kvfile.as_bool(raw)
            elif action.type is not None:
                defaults[action.dest] = action.type(raw)
            else:
                defaults[action.dest] = raw
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    extra = {k: v for k, v in values.items() if k.replace("-", "_") not in dests}
    return args, extra


def _split_extra(extra: dict[str, str], seed: int | None) -> tuple[TrainConfig, ModelConfig]:
    train_kw = {k: v for k, v in extra.items() if not k.startswith("model.")}
    _check_train_keys(train_kw, "config")
    cfg = TrainConfig.from_kv(train_kw)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    model = ModelConfig(**_typed(ModelConfig, {k[6:]: v for k, v in extra.items()
                                              if k.startswith("model.")})).validate()
    return cfg, model


def _manifest_pool(path: str) -> dict[str, ParallelCorpus]:
    pool = {}
    for entry in read_manifest(path):
        try:
            pool[entry.code] = entry.load()
        except CorpusError as exc:
            raise type(exc)(f"{entry.pair_id}: {exc}") from None
    return pool


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_gen_data(args, extra) -> None:
    _no_extra(extra)
    seed = args.seed if args.seed is not None else 0
    corpora = make_shared_task_replica(seed, args.scale) + make_pretraining_suite(seed, args.scale)[1:]
    pool = {c.target_code: c for c in corpora}
    out = Path(args.out)
    _write_data(pool, out)
    sys.stdout.write(stats(corpora).render())


def _cmd_pretrain(args, extra) -> None:
    cfg, mcfg = _split_extra(extra, args.seed)
    pool = _manifest_pool(args.manifest)
    codes = _codes(args.pairs)
    missing = [c for c in codes if c not in pool]
    if missing:
        raise PlanError(f"pairs missing from manifest: {missing}")
    kind = args.kind or ("bilingual" if len(codes) == 1 else "multilingual")
    vocab = build_vocab(list(pool.values()), args.vocab_size)
    model = pretrain_base(kind, [pool[c] for c in codes], cfg, mcfg, vocab)
    model.save(args.out)
    sys.stdout.write("".join(line + "\n" for line in model.history[-1].log_lines))


def _cmd_finetune(args, extra) -> None:
    cfg, mcfg = _split_extra(extra, args.seed)
    cfg = cfg.replace(include_dev=args.include_dev)
    pool = _manifest_pool(args.manifest)
    parent = TranslationModel.load(args.model)
    codes = _codes(args.pair)
    missing = [c for c in codes if c not in pool]
    if missing:
        raise PlanError(f"pairs missing from manifest: {missing}")
    if args.scratch:
        if len(codes) != 1:
            raise PlanError("--scratch trains one pair")
        model = train_from_scratch(parent.vocab, parent.transformer.config, pool[codes[0]], cfg)
    elif len(codes) > 1:
        model = build_intermediate(parent, [pool[c] for c in codes], cfg)
    else:
        model = finetune_direct(parent, pool[codes[0]], cfg)
    model.save(args.out)
    sys.stdout.write("".join(line + "\n" for line in model.history[-1].log_lines))


def _cmd_evaluate(args, extra) -> None:
    _no_extra(extra)
    cfg = ChrFConfig(order=args.order, beta=args.beta)
    if args.hyp or args.ref:
        if not (args.hyp and args.ref):
            raise PlanError("--hyp and --ref go together")
        hyps = _lines(args.hyp)
        refs = _lines(args.ref)
        score = chrf_corpus(hyps, refs, cfg)
    else:
        if not (args.model and args.manifest and args.pair):
            raise PlanError("give --hyp/--ref, or --model with --manifest and --pair")
        pool = _manifest_pool(args.manifest)
        if args.pair not in pool:
            raise PlanError(f"pair {args.pair!r} missing from manifest")
        score, hyps = evaluate(TranslationModel.load(args.model), pool[args.pair], args.split, cfg)
        if args.out:
            Path(args.out).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    sys.stdout.write(f"{score:.2f}\n")


def _lines(path: str) -> list[str]:
    text = Path(path).read_bytes().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _cmd_experiment(args, extra) -> None:
    if Path(args.plan).exists():
        path = Path(args.plan)
        text, source, root = path.read_text(encoding="utf-8"), str(path), str(path.parent)
    elif args.plan in ("replica", "replica-smoke"):
        text = resources.files("mtlab.data").joinpath(f"{args.plan}.plan").read_text(encoding="utf-8")
        source, root = f"{args.plan}.plan", "."
    else:
        raise FileNotFoundError(f"no plan file {args.plan!r}")
    overrides = dict(extra)
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    plan = ExperimentPlan.from_text(text, source, root, overrides)
    result = run_experiment(plan, args.out)
    sys.stdout.write(render_report(result, "text-table"))
    if result.failed:
        raise _Failure(f"{len(result.failed)} cell(s) failed; see {Path(args.out) / 'results.txt'}")


def _cmd_report(args, extra) -> None:
    _no_extra(extra)
    result = load_result(args.experiment)
    _emit(render_report(result, args.format, args.rounding), args.out)


def _cmd_stats(args, extra) -> None:
    _no_extra(extra)
    entries = read_manifest(args.manifest) if args.manifest else table1_manifest()
    table = stats(entries)
    _emit(table.render() if args.format == "text-table" else table.to_csv(), args.out)


def _no_extra(extra: dict[str, str]) -> None:
    if extra:
        raise PlanError(f"unknown config keys {sorted(extra)}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
    "stats": _cmd_stats,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit status.

    Failures print a single ``error: <Type>: <message>`` line on stderr and
    return 1; usage errors print the usage text and return 2.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        return _report_error(exc)
    try:
        _COMMANDS[args.command](args, extra)
    except Exception as exc:
        return _report_error(exc)
    return 0


def _report_error(exc: Exception) -> int:
    msg = " ".join(str(exc).split()) or "no details"
    name = "CellFailure" if isinstance(exc, _Failure) else type(exc).__name__
    sys.stderr.write(f"error: {name}: {msg}\n")
    return 1


def main() -> None:
    logging.basicConfig(level=os.environ.get("MTLAB_LOG", "WARNING"), format="%(message)s")
    sys.exit(cli_main())
