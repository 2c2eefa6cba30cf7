"""Adam training loop and the transfer-learning strategies.

Strategy kinds (each ends in one model per language pair):

``direct``        fine-tune a pretrained base on the pair (M1/M3 analogs;
                  the bilingual base gives the M4 analog)
``intermediate``  fine-tune the base on all pairs' training rows combined,
                  then fine-tune that intermediate model on the pair (M2)
``bilingual``     ``direct`` from a one-pair base, kept as its own kind so
                  reports can tell the families apart
``scratch``       random initialisation with the same per-pair budget
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import kvfile
from .corpus import ParallelCorpus
from .metrics import ChrFConfig, chrf_corpus
from .model import ConfigError, ModelConfig, Transformer, forward, greedy_decode, init_params
from .tokenizer import Vocab, VocabError, train_bpe

__all__ = [
    "TrainConfig",
    "TrainingError",
    "TrainResult",
    "Adam",
    "clip_grad_norm",
    "TranslationModel",
    "Strategy",
    "STRATEGY_KINDS",
    "training_rows",
    "encode_rows",
    "train",
    "build_vocab",
    "pretrain_base",
    "finetune_direct",
    "build_intermediate",
    "finetune_from_intermediate",
    "train_from_scratch",
    "translate",
    "evaluate",
]

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    shuffle: bool = True
    include_dev: bool = False

    def __post_init__(self):
        # epochs=0 is allowed: it turns a stage into a no-op copy
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise ConfigError(f"invalid training config: {self}")

    @classmethod
    def from_kv(cls, values: dict[str, str], prefix: str = "") -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            key = prefix + f.name
            if key in values:
                raw = values[key]
                kw[f.name] = (kvfile.as_bool(raw) if f.type in ("bool", bool)
                              else int(raw) if f.type in ("int", int) else float(raw))
        return cls(**kw)

    def to_kv(self, prefix: str = "") -> dict[str, object]:
        return {prefix + k: v for k, v in asdict(self).items()}

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class TrainResult:
    model: Transformer
    losses: list[float]
    steps: int
    dropped: int
    log_lines: list[str] = field(default_factory=list)
    examples: int = 0


def clip_grad_norm(params: Sequence[ad.Tensor], max_norm: float) -> float:
    """Rescale gradients in place to global L2 norm <= ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Adam over all parameters at once, with flat first/second moment buffers."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        bounds = np.cumsum([0] + [p.data.size for p in self.params])
        self.slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        self.m = np.zeros(bounds[-1])
        self.v = np.zeros(bounds[-1])
        # scratch buffers reused every step; fresh arrays this size are far slower
        self._g = np.zeros(bounds[-1])
        self._tmp = np.zeros(bounds[-1])
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        g, tmp = self._g, self._tmp
        for p, sl in zip(self.params, self.slices):
            if p.grad is None:
                g[sl] = 0.0
            else:
                g[sl] = p.grad.ravel()
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=tmp)
        self.m += tmp
        np.multiply(g, g, out=g)
        g *= 1.0 - self.beta2
        self.v *= self.beta2
        self.v += g
        # update = lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(self.v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / c1
        for p, sl in zip(self.params, self.slices):
            p.data -= tmp[sl].reshape(p.data.shape)


# --- data -----------------------------------------------------------------------


def training_rows(corpus: ParallelCorpus, include_dev: bool = False) -> list[tuple[str, str, str]]:
    """(source, target, target-language) rows of the train split, plus dev if asked."""
    rows = [(s, t, corpus.target_code) for s, t in corpus.train]
    if include_dev:
        rows += [(s, t, corpus.target_code) for s, t in corpus.dev]
    return rows


def encode_rows(vocab: Vocab, rows: Iterable[tuple[str, str, str]], max_len: int):
    """Encode rows; pairs longer than ``max_len`` on either side are dropped, not truncated."""
    examples, dropped = [], 0
    for src, tgt, lang in rows:
        s = vocab.encode(src, lang)
        t = vocab.encode(tgt)
        if len(s) > max_len or len(t) > max_len + 1:
            dropped += 1
            continue
        examples.append((s, t))
    return examples, dropped


def _pad(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _batches(examples, config: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled, length-bucketed batches.

    Examples are shuffled, sorted by target length inside windows of eight
    batches (less padding), cut into batches, and the batch order shuffled.
    """
    n, bs = len(examples), config.batch_size
    idx = rng.permutation(n) if config.shuffle else np.arange(n)
    if config.shuffle:
        window = 8 * bs
        for start in range(0, n, window):
            part = idx[start:start + window]
            lens = np.array([len(examples[i][1]) for i in part])
            idx[start:start + window] = part[np.argsort(lens, kind="stable")]
    batches = [idx[s:s + bs] for s in range(0, n, bs)]
    if config.shuffle:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def batch_loss(model: Transformer, batch, rng=None) -> ad.Tensor:
    """Teacher-forced token-mean cross-entropy of a batch of (src_ids, tgt_ids)."""
    src = _pad([s for s, _ in batch])
    tgt = _pad([t for _, t in batch])
    logits = forward(model, src, tgt[:, :-1], rng)
    v = logits.shape[-1]
    return ad.cross_entropy(ad.reshape(logits, (-1, v)), tgt[:, 1:].reshape(-1), ignore_id=0)


def train(model: Transformer, vocab: Vocab, rows: Sequence[tuple[str, str, str]],
          config: TrainConfig, label: str = "train") -> TrainResult:
    """Adam with global-norm clipping for ``config.epochs`` passes over ``rows``.

    ``model`` is left untouched; the returned result holds a trained copy.
    Shuffling and dropout draw from generators seeded by ``config.seed``.
    """
    examples, dropped = encode_rows(vocab, rows, model.config.max_seq_len)
    if dropped:
        log.info("%s: dropped %d overlong pairs", label, dropped)
    if not examples:
        raise TrainingError(f"{label}: no training examples")
    model = model.copy()
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2]) if model.config.dropout_rate > 0 else None
    losses, lines, steps = [], [], 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        epoch_losses = []
        for batch_idx in _batches(examples, config, order_rng):
            batch = [examples[i] for i in batch_idx]
            model.zero_grad()
            loss = batch_loss(model, batch, drop_rng)
            ad.backward(loss)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            epoch_losses.append(loss.item())
            steps += 1
        losses.append(float(np.mean(epoch_losses)))
        line = f"{label} epoch={epoch} loss={losses[-1]:.6f} time={time.perf_counter() - t0:.2f}s"
        lines.append(line)
        log.info(line)
    model.zero_grad()
    return TrainResult(model, losses, steps, dropped, lines, len(examples))


# --- models & strategies ---------------------------------------------------------------


@dataclass
class TranslationModel:
    """A transformer together with the shared vocabulary it was trained with."""

    name: str
    kind: str
    transformer: Transformer
    vocab: Vocab
    history: list[TrainResult] = field(default_factory=list, repr=False)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.transformer.save(d / "model.ckpt")
        self.vocab.save(d / "vocab.bpe")
        lines = [ln for r in self.history for ln in r.log_lines]
        (d / "train.log").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, name: str = "", kind: str = "") -> "TranslationModel":
        d = Path(directory)
        return cls(name or d.name, kind, Transformer.load(d / "model.ckpt"), Vocab.load(d / "vocab.bpe"))

    def checkpoint_bytes(self) -> bytes:
        return self.transformer.to_bytes()


STRATEGY_KINDS = ("direct", "intermediate", "bilingual", "scratch")


@dataclass(frozen=True)
class Strategy:
    """A named model-building recipe.

    ``stages`` holds one :class:`TrainConfig` per training stage: one for
    ``direct``/``bilingual``/``scratch``, two for ``intermediate``
    (combined-data stage, then per-pair stage).
    """

    name: str
    kind: str
    base: str | None
    stages: tuple[TrainConfig, ...]

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        want = 2 if self.kind == "intermediate" else 1
        if len(self.stages) != want:
            raise ConfigError(f"{self.kind} strategy needs {want} stage config(s), got {len(self.stages)}")
        if self.kind != "scratch" and not self.base:
            raise ConfigError(f"{self.kind} strategy {self.name!r} needs a base model")

    @property
    def final_stage(self) -> TrainConfig:
        return self.stages[-1]


def build_vocab(corpora: Sequence[ParallelCorpus], vocab_size: int = 512,
                language_codes: Sequence[str] = ()) -> Vocab:
    """Shared BPE over every sentence of ``corpora``; tags for their targets plus extras."""
    codes: list[str] = []
    for code in [c.target_code for c in corpora] + list(language_codes):
        if code not in codes:
            codes.append(code)
    text = [x for c in corpora for s, t, _ in c.rows() for x in (s, t)]
    return train_bpe(text, vocab_size, codes)


def pretrain_base(kind: str, corpora: Sequence[ParallelCorpus], config: TrainConfig,
                  model_config: ModelConfig = ModelConfig(), vocab: Vocab | None = None,
                  name: str = "") -> TranslationModel:
    """Train a stand-in for a public checkpoint on high-resource pairs.

    ``bilingual`` takes exactly one pair, ``multilingual`` at least two; the
    multilingual rows are interleaved by shuffling, each with its own tag.
    """
    if kind == "bilingual" and len(corpora) != 1:
        raise ConfigError(f"bilingual base needs exactly one pair, got {len(corpora)}")
    if kind == "multilingual" and len(corpora) < 2:
        raise ConfigError(f"multilingual base needs at least two pairs, got {len(corpora)}")
    if kind not in ("bilingual", "multilingual"):
        raise ConfigError(f"unknown base kind {kind!r}")
    if vocab is None:
        vocab = build_vocab(corpora, model_config.vocab_size)
    for c in corpora:
        vocab.tag_id(c.target_code)
    mcfg = model_config.replace(vocab_size=len(vocab))
    rows = [r for c in corpora for r in training_rows(c, config.include_dev)]
    init = init_params(mcfg, config.seed)
    result = train(init, vocab, rows, config, label=f"pretrain-{name or kind}")
    return TranslationModel(name or f"{kind}-base", f"{kind}-base", result.model, vocab, [result])


def _check_pair(model: TranslationModel, pair: ParallelCorpus) -> None:
    try:
        model.vocab.tag_id(pair.target_code)
    except VocabError:
        raise VocabError(f"{model.name}: no tag token for {pair.target_code!r}; "
                         f"reserve it when building the vocabulary") from None


def finetune_direct(base: TranslationModel, pair: ParallelCorpus, config: TrainConfig,
                    name: str = "") -> TranslationModel:
    """Continue training ``base`` on one pair; ``base`` itself is not modified."""
    _check_pair(base, pair)
    rows = training_rows(pair, config.include_dev)
    result = train(base.transformer, base.vocab, rows, config, label=f"finetune-{pair.pair_id}")
    return TranslationModel(name or f"{base.name}+{pair.target_code}", "finetuned",
                            result.model, base.vocab, base.history + [result])


def build_intermediate(base: TranslationModel, pairs: Sequence[ParallelCorpus],
                       config: TrainConfig, name: str = "") -> TranslationModel:
    """Fine-tune on the concatenation of every pair's training rows."""
    if len(pairs) < 2:
        raise ConfigError(f"intermediate model needs at least two pairs, got {len(pairs)}")
    for p in pairs:
        _check_pair(base, p)
    rows = combined_rows(pairs, config.include_dev)
    result = train(base.transformer, base.vocab, rows, config, label="intermediate")
    return TranslationModel(name or f"{base.name}-inter", "intermediate", result.model,
                            base.vocab, base.history + [result])


def combined_rows(pairs: Sequence[ParallelCorpus], include_dev: bool = False):
    """Plain concatenation of all pairs' rows, each keeping its own tag."""
    return [r for p in pairs for r in training_rows(p, include_dev)]


def finetune_from_intermediate(inter: TranslationModel, pair: ParallelCorpus,
                               config: TrainConfig, name: str = "") -> TranslationModel:
    return finetune_direct(inter, pair, config, name)


def train_from_scratch(vocab: Vocab, model_config: ModelConfig, pair: ParallelCorpus,
                       config: TrainConfig, name: str = "") -> TranslationModel:
    """No-transfer baseline: random init, same vocabulary and budget."""
    vocab.tag_id(pair.target_code)
    init = init_params(model_config.replace(vocab_size=len(vocab)), config.seed)
    rows = training_rows(pair, config.include_dev)
    result = train(init, vocab, rows, config, label=f"scratch-{pair.pair_id}")
    return TranslationModel(name or f"scratch+{pair.target_code}", "scratch", result.model,
                            vocab, [result])


# --- inference -------------------------------------------------------------------------


def translate(model: TranslationModel, sentences: Sequence[str], lang: str,
              batch_size: int = 100, max_len: int | None = None) -> list[str]:
    """Greedy translation of ``sentences`` into ``lang``.

    Sources longer than the model's window are cut to fit (evaluation must
    produce one hypothesis per reference).  The default output budget is
    ``2 * len(source) + 10`` tokens.  Line breaks in the output become
    spaces so each hypothesis stays one line of a hypothesis file.
    """
    vocab, cap = model.vocab, model.transformer.config.max_seq_len
    encoded = []
    for s in sentences:
        ids = vocab.encode(s, lang)
        if len(ids) > cap:
            ids = ids[:cap - 1] + [vocab.eos_id]
        encoded.append(ids)
    order = sorted(range(len(encoded)), key=lambda i: len(encoded[i]))
    out: list[str] = [""] * len(encoded)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        src = _pad([encoded[i] for i in chunk])
        budget = max_len if max_len is not None else 2 * src.shape[1] + 10
        hyps = greedy_decode(model.transformer, src, budget, vocab.bos_id, vocab.eos_id, vocab.pad_id)
        for i, h in zip(chunk, hyps):
            out[i] = " ".join(vocab.decode(h).split("\n")).replace("\r", " ")
    return out


def evaluate(model: TranslationModel, pair: ParallelCorpus, split: str = "dev",
             chrf: ChrFConfig = ChrFConfig()) -> tuple[float, list[str]]:
    """Corpus chrF of greedy translations of a split; returns (score, hypotheses)."""
    rows = pair.split(split)
    if not rows:
        raise TrainingError(f"{pair.pair_id}: empty {split} split")
    hyps = translate(model, [s for s, _ in rows], pair.target_code)
    return chrf_corpus(hyps, [t for _, t in rows], chrf), hyps
