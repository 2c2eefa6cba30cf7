"""Parallel corpora: loading, manifests, split statistics, synthetic languages.

Synthetic data
--------------
Source sentences come from a fixed template grammar (10 subjects x 10 verbs
x 10 objects x 8 modifiers = 8,000 Spanish-like clauses).  A synthetic
target language is a deterministic transducer over the four clause chunks:

1. every word is replaced through the language's lexicon (unknown words
   pass through unchanged),
2. a per-chunk suffix is glued onto the chunk's last word (agglutinative
   case/role markers),
3. the chunks are reordered by the language's permutation (e.g. SVO->SOV),
4. optionally, each word is written in a variant spelling (first vowel
   toggled between plain and diaeresis form) with probability
   ``variation``, seeded by the sentence text, mimicking unstandardised
   orthography.

Languages are built together as a family so that, for relatedness ``rho``,
a member takes the family's root form for the first ``ceil(rho * N)``
lexicon entries (in a family-wide order) and a form unique within the
family for the rest.

All randomness uses SplitMix64::

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state
    z <- (z xor (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z <- (z xor (z >> 27)) * 0x94D049BB133111EB mod 2^64
    return z xor (z >> 31)

Bounded draws use rejection sampling and shuffles are Fisher-Yates from the
last index down, so generated corpora are identical on every platform.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from . import kvfile

__all__ = [
    "SPLITS",
    "SplitMix64",
    "derive_seed",
    "ParallelCorpus",
    "CorpusError",
    "AlignmentError",
    "EncodingError",
    "ParseError",
    "SizeError",
    "load_corpus",
    "save_corpus",
    "ManifestEntry",
    "read_manifest",
    "write_manifest",
    "table1_manifest",
    "StatsRow",
    "StatsTable",
    "stats",
    "template_sentences",
    "source_words",
    "SynthLangSpec",
    "identity_language",
    "make_family",
    "generate_synth_pair",
    "REPLICA_TABLE",
    "PRETRAIN_ONLY_TABLE",
    "replica_languages",
    "make_shared_task_replica",
    "make_pretraining_suite",
]

SPLITS = ("train", "dev", "test")
_MASK64 = (1 << 64) - 1


class CorpusError(ValueError):
    pass


class AlignmentError(CorpusError):
    pass


class EncodingError(CorpusError):
    pass


class ParseError(CorpusError):
    pass


class SizeError(CorpusError):
    pass


# --- PRNG ---------------------------------------------------------------------


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("below() needs n > 0")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def random(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def choice(self, seq: Sequence):
        return seq[self.below(len(seq))]

    def shuffled(self, seq: Iterable) -> list:
        out = list(seq)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def derive_seed(seed: int, *labels: object) -> int:
    """Stable 64-bit child seed for ``(seed, labels...)``."""
    key = ":".join([str(seed), *map(str, labels)]).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


# --- corpus -------------------------------------------------------------------


def _check_code(code: str) -> None:
    if not code or not code.isascii() or any(c.isspace() or c in "-=," for c in code):
        raise CorpusError(f"language code must be a non-empty ASCII token, got {code!r}")


@dataclass(frozen=True)
class ParallelCorpus:
    """Line-aligned (source, target) rows for one language pair, by split."""

    source_code: str
    target_code: str
    train: tuple[tuple[str, str], ...] = ()
    dev: tuple[tuple[str, str], ...] = ()
    test: tuple[tuple[str, str], ...] = ()
    name: str = field(default="", compare=False)
    family: str = field(default="", compare=False)

    def __post_init__(self):
        _check_code(self.source_code)
        _check_code(self.target_code)
        for split in SPLITS:
            rows = tuple((str(s), str(t)) for s, t in getattr(self, split))
            object.__setattr__(self, split, rows)
            for i, (s, t) in enumerate(rows):
                if not s and not t:
                    raise CorpusError(f"{self.pair_id} {split} row {i}: empty source and target")

    @property
    def pair_id(self) -> str:
        return f"{self.source_code}-{self.target_code}"

    @property
    def code(self) -> str:
        return self.target_code

    def split(self, name: str) -> tuple[tuple[str, str], ...]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {s: len(getattr(self, s)) for s in SPLITS}

    def rows(self):
        """All rows as (source, target, split) in train/dev/test order."""
        for split in SPLITS:
            for s, t in getattr(self, split):
                yield s, t, split

    def merged(self, other: "ParallelCorpus") -> "ParallelCorpus":
        if other.pair_id != self.pair_id:
            raise CorpusError(f"cannot merge {self.pair_id} with {other.pair_id}")
        return ParallelCorpus(self.source_code, self.target_code,
                              self.train + other.train, self.dev + other.dev,
                              self.test + other.test, self.name or other.name,
                              self.family or other.family)

    def stats_row(self) -> "StatsRow":
        c = self.counts()
        return StatsRow(self.name or self.target_code, self.target_code, self.family,
                        c["train"], c["dev"], c["test"])


def _parse_pair(pair) -> tuple[str, str]:
    if isinstance(pair, str):
        parts = pair.replace("→", "-").split("-")
        if len(parts) != 2:
            raise CorpusError(f"pair id must look like 'es-quy', got {pair!r}")
        return parts[0], parts[1]
    src, tgt = pair
    return src, tgt


def _read_lines(path: str | Path) -> list[str]:
    raw = Path(path).read_bytes()
    chunks = raw.split(b"\n")
    if chunks and chunks[-1] == b"":
        chunks.pop()
    lines = []
    for i, chunk in enumerate(chunks, start=1):
        try:
            lines.append(chunk.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise EncodingError(f"{path}: line {i} is not valid UTF-8 ({exc.reason})") from None
    return lines


def load_corpus(source_path: str | Path, target_path: str | Path | None = None, *,
                pair="es-xx", split: str = "train") -> ParallelCorpus:
    """Load one split from two aligned files, or from one TSV file.

    With ``target_path=None`` the source path is read as TSV: exactly one
    tab per line separating source and target.
    """
    src_code, tgt_code = _parse_pair(pair)
    if split not in SPLITS:
        raise CorpusError(f"unknown split {split!r}")
    if target_path is None:
        rows = []
        for i, line in enumerate(_read_lines(source_path), start=1):
            if line.count("\t") != 1:
                raise ParseError(f"{source_path}: line {i} has {line.count(chr(9))} tabs, expected 1")
            s, t = line.split("\t")
            rows.append((s, t))
    else:
        src, tgt = _read_lines(source_path), _read_lines(target_path)
        if len(src) != len(tgt):
            raise AlignmentError(f"line counts differ: {len(src)} vs {len(tgt)} "
                                 f"({source_path}, {target_path})")
        rows = list(zip(src, tgt))
    return ParallelCorpus(src_code, tgt_code, **{split: tuple(rows)})


def _check_line(text: str, where: str) -> None:
    if "\n" in text or "\r" in text:
        raise CorpusError(f"{where}: sentence contains a line break")


def save_corpus(corpus: ParallelCorpus, directory: str | Path) -> "ManifestEntry":
    """Write ``<split>.<code>`` files per non-empty split; returns its manifest entry."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        rows = corpus.split(split)
        if not rows:
            continue
        for s, t in rows:
            _check_line(s, corpus.pair_id)
            _check_line(t, corpus.pair_id)
        sp = out / f"{split}.{corpus.source_code}"
        tp = out / f"{split}.{corpus.target_code}"
        sp.write_bytes("".join(s + "\n" for s, _ in rows).encode("utf-8"))
        tp.write_bytes("".join(t + "\n" for _, t in rows).encode("utf-8"))
        paths[split] = (str(sp), str(tp))
    c = corpus.counts()
    return ManifestEntry(corpus.target_code, corpus.source_code, corpus.name, corpus.family,
                         c["train"], c["dev"], c["test"], paths)


# --- manifests & statistics ---------------------------------------------------------


@dataclass
class ManifestEntry:
    """One ``key=value`` block: code, optional metadata, split sizes, paths.

    Paths use ``<split>.src``/``<split>.tgt`` (two-file form) or
    ``<split>.tsv``.  Relative paths resolve against the manifest's folder.
    """

    code: str
    source: str = "es"
    name: str = ""
    family: str = ""
    train: int | None = None
    dev: int | None = None
    test: int | None = None
    paths: dict[str, tuple[str, str | None]] = field(default_factory=dict)

    @property
    def pair_id(self) -> str:
        return f"{self.source}-{self.code}"

    def load(self) -> ParallelCorpus:
        if not self.paths:
            raise CorpusError(f"manifest entry {self.code!r} has no data paths")
        corpus = ParallelCorpus(self.source, self.code, name=self.name, family=self.family)
        for split, (a, b) in self.paths.items():
            corpus = corpus.merged(load_corpus(a, b, pair=(self.source, self.code), split=split))
        for split in SPLITS:
            declared = getattr(self, split)
            if declared is not None and self.paths.get(split) and declared != len(corpus.split(split)):
                raise SizeError(f"{self.pair_id} {split}: manifest declares {declared} rows, "
                                f"files hold {len(corpus.split(split))}")
        return corpus

    def stats_row(self) -> "StatsRow":
        if self.paths:
            return self.load().stats_row()
        return StatsRow(self.name or self.code, self.code, self.family,
                        self.train or 0, self.dev or 0, self.test or 0)

    def to_block(self) -> dict[str, object]:
        out: dict[str, object] = {"code": self.code, "source": self.source}
        if self.name:
            out["name"] = self.name
        if self.family:
            out["family"] = self.family
        for split in SPLITS:
            if getattr(self, split) is not None:
                out[split] = getattr(self, split)
        for split, (a, b) in self.paths.items():
            if b is None:
                out[f"{split}.tsv"] = a
            else:
                out[f"{split}.src"], out[f"{split}.tgt"] = a, b
        return out


def _entry_from_block(block: dict[str, str], base: Path, where: str) -> ManifestEntry:
    known = {"code", "source", "name", "family", *SPLITS}
    known |= {f"{s}.{k}" for s in SPLITS for k in ("src", "tgt", "tsv")}
    extra = set(block) - known
    if extra:
        raise kvfile.FormatError(f"{where}: unknown manifest keys {sorted(extra)}")
    if "code" not in block:
        raise kvfile.FormatError(f"{where}: manifest block without code=")

    def resolve(p):
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    paths = {}
    for split in SPLITS:
        if f"{split}.tsv" in block:
            paths[split] = (resolve(block[f"{split}.tsv"]), None)
        elif f"{split}.src" in block or f"{split}.tgt" in block:
            if not (f"{split}.src" in block and f"{split}.tgt" in block):
                raise kvfile.FormatError(f"{where}: {split}.src and {split}.tgt must come together")
            paths[split] = (resolve(block[f"{split}.src"]), resolve(block[f"{split}.tgt"]))
    sizes = {s: int(block[s].replace(",", "")) for s in SPLITS if s in block}
    return ManifestEntry(block["code"], block.get("source", "es"), block.get("name", ""),
                         block.get("family", ""), paths=paths, **sizes)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    return [_entry_from_block(b, path.parent, str(path)) for b in kvfile.read_blocks(path)]


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    text = "\n".join(kvfile.dumps(e.to_block()) for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def table1_manifest() -> list[ManifestEntry]:
    """Packaged split sizes of the eleven shared-task language pairs."""
    text = resources.files("mtlab.data").joinpath("table1.manifest").read_text(encoding="utf-8")
    return [_entry_from_block(b, Path("."), "table1.manifest")
            for b in kvfile.parse_blocks(text, "table1.manifest")]


@dataclass(frozen=True)
class StatsRow:
    language: str
    code: str
    family: str
    train: int
    dev: int
    test: int


@dataclass(frozen=True)
class StatsTable:
    rows: tuple[StatsRow, ...]

    HEADER = ("Language", "ISO", "Family", "Train", "Dev", "Test")

    def cells(self) -> list[tuple[str, ...]]:
        return [(r.language, r.code, r.family, f"{r.train:,}", f"{r.dev:,}", f"{r.test:,}")
                for r in self.rows]

    def total(self, split: str) -> int:
        return sum(getattr(r, split) for r in self.rows)

    def render(self) -> str:
        table = [self.HEADER, *self.cells()]
        widths = [max(len(row[i]) for row in table) for i in range(len(self.HEADER))]
        lines = []
        for k, row in enumerate(table):
            parts = [c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
            lines.append("  ".join(parts).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r.language, r.code, r.family, r.train, r.dev, r.test])
        return buf.getvalue()


def stats(corpora: Iterable[ParallelCorpus | ManifestEntry]) -> StatsTable:
    """Per-pair train/dev/test sentence counts in Table-1 column order."""
    return StatsTable(tuple(c.stats_row() for c in corpora))


# --- template grammar ---------------------------------------------------------------

_SUBJECTS = ("el perro", "la mujer", "mi hermano", "el niño", "la maestra",
             "nuestro abuelo", "tu amiga", "el campesino", "la familia", "un viajero")
_VERBS = ("come", "mira", "busca", "lleva", "vende",
          "compra", "prepara", "encuentra", "cuida", "necesita")
_OBJECTS = ("el pan", "la casa", "una flor", "el maíz", "la leña",
            "un libro", "el agua", "la fruta", "una manta", "el caballo")
_MODIFIERS = ("hoy", "en el río", "cada mañana", "con alegría",
              "por la noche", "cerca del pueblo", "después de la lluvia", "sin prisa")


def template_sentences() -> list[tuple[str, str, str, str]]:
    """All 8,000 (subject, verb, object, modifier) clauses in a fixed order."""
    return [(s, v, o, m) for s in _SUBJECTS for v in _VERBS for o in _OBJECTS for m in _MODIFIERS]


def source_words() -> list[str]:
    """Distinct words of the template grammar, sorted."""
    words = set()
    for group in (_SUBJECTS, _VERBS, _OBJECTS, _MODIFIERS):
        for phrase in group:
            words.update(phrase.split())
    return sorted(words)


# --- synthetic languages --------------------------------------------------------------

_ONSETS = ("p", "t", "k", "q", "ch", "m", "n", "ñ", "s", "sh", "w", "y", "r", "ll", "h", "ts")
_NUCLEI = ("a", "i", "u", "e", "o", "ä", "ü", "ï", "aa", "ɨ")
_SUFFIXES = ("", "", "ka", "ta", "pi", "man", "ri", "wa", "kuna", "mi", "sha", "tsi")
_ORDERS = ((0, 1, 2, 3), (0, 2, 1, 3), (3, 0, 2, 1), (2, 0, 1, 3), (0, 1, 3, 2), (3, 0, 1, 2))


@dataclass(frozen=True, eq=False)
class SynthLangSpec:
    """Deterministic transducer from template clauses to a synthetic language."""

    code: str
    seed: int
    lexicon: dict[str, str]
    suffixes: tuple[str, ...] = ()
    order: tuple[int, ...] = ()
    relatedness: float = 0.0
    name: str = ""
    family: str = ""
    variation: float = 0.0

    def __post_init__(self):
        _check_code(self.code)
        if not 0.0 <= self.variation <= 1.0:
            raise CorpusError(f"variation must lie in [0, 1], got {self.variation}")
        if not 0.0 <= self.relatedness <= 1.0:
            raise CorpusError(f"relatedness must lie in [0, 1], got {self.relatedness}")
        if self.order and sorted(self.order) != list(range(len(self.order))):
            raise CorpusError(f"order {self.order} is not a permutation")

    @property
    def vocab_size(self) -> int:
        return len(self.lexicon)

    def translate(self, sentence: str | Sequence[str]) -> str:
        chunks = sentence.split() if isinstance(sentence, str) else list(sentence)
        out = []
        for i, chunk in enumerate(chunks):
            words = [self.lexicon.get(w, w) for w in chunk.split()]
            if i < len(self.suffixes) and self.suffixes[i] and words:
                words[-1] += self.suffixes[i]
            out.append(" ".join(words))
        if len(self.order) == len(out):
            out = [out[j] for j in self.order]
        text = " ".join(c for c in out if c)
        if self.variation > 0:
            rng = SplitMix64(derive_seed(self.seed, self.code, "spelling", text))
            text = " ".join(_respell(w) if rng.random() < self.variation else w
                            for w in text.split(" "))
        return text


_TOGGLE = {"a": "ä", "ä": "a", "e": "ë", "ë": "e", "i": "ï", "ï": "i",
           "o": "ö", "ö": "o", "u": "ü", "ü": "u"}


def _respell(word: str) -> str:
    for i, ch in enumerate(word):
        if ch in _TOGGLE:
            return word[:i] + _TOGGLE[ch] + word[i + 1:]
    return word


def identity_language(code: str = "id") -> SynthLangSpec:
    return SynthLangSpec(code, 0, {})


def _form(rng: SplitMix64) -> str:
    n = 1 + rng.below(3)
    return "".join(rng.choice(_ONSETS) + rng.choice(_NUCLEI) for _ in range(n))


def make_family(family_seed: int, members: Sequence[tuple[str, int, float]],
                words: Sequence[str] | None = None, family: str = "") -> list[SynthLangSpec]:
    """Build related languages sharing a root lexicon.

    ``members`` holds ``(code, seed, relatedness)``.  Member ``m`` uses the
    root form for the first ``ceil(rho_m * N)`` words of a family-wide word
    order and a family-unique private form for the rest, so two members with
    relatedness ``a <= b`` share exactly ``ceil(a * N)`` lexicon entries.
    """
    words = sorted(set(words if words is not None else source_words()))
    root_rng = SplitMix64(derive_seed(family_seed, "root"))
    used: dict[str, set[str]] = {w: set() for w in words}
    root = {}
    for w in words:
        root[w] = _form(root_rng)
        used[w].add(root[w])
    order = SplitMix64(derive_seed(family_seed, "order")).shuffled(words)
    specs = []
    for code, seed, rho in members:
        rng = SplitMix64(derive_seed(seed, code, "lexicon"))
        shared = math.ceil(rho * len(words) - 1e-12)
        lexicon = {}
        for k, w in enumerate(order):
            if k < shared:
                lexicon[w] = root[w]
            else:
                form = _form(rng)
                while form in used[w]:
                    form = _form(rng)
                used[w].add(form)
                lexicon[w] = form
        grammar = SplitMix64(derive_seed(seed, code, "grammar"))
        suffixes = tuple(grammar.choice(_SUFFIXES) for _ in range(4))
        perm = grammar.choice(_ORDERS)
        specs.append(SynthLangSpec(code, seed, dict(sorted(lexicon.items())), suffixes, perm,
                                   rho, family=family))
    return specs


def generate_synth_pair(spec: SynthLangSpec, sentences: Sequence[str | Sequence[str]],
                        sizes: tuple[int, int, int], source_code: str = "es") -> ParallelCorpus:
    """Translate disjoint train/dev/test draws of ``sentences`` through ``spec``."""
    need = sum(sizes)
    if min(sizes) < 0:
        raise SizeError(f"split sizes must be non-negative, got {sizes}")
    if need > len(sentences):
        raise SizeError(f"need {need} source sentences, only {len(sentences)} available")
    picks = SplitMix64(derive_seed(spec.seed, spec.code, "splits")).shuffled(range(len(sentences)))
    splits = {}
    start = 0
    for name, n in zip(SPLITS, sizes):
        rows = []
        for idx in picks[start:start + n]:
            sent = sentences[idx]
            src = sent if isinstance(sent, str) else " ".join(sent)
            rows.append((src, spec.translate(sent)))
        splits[name] = tuple(rows)
        start += n
    return ParallelCorpus(source_code, spec.code, name=spec.name or spec.code,
                          family=spec.family, **splits)


# --- shared-task replica -------------------------------------------------------------

# code, name, train rows, relatedness to the family root, spelling variation
REPLICA_TABLE = (
    ("en", "high-resource (es-en analog)", 5000, 0.5, 0.0),
    ("quy", "large (quy/nah analog)", 2000, 0.7, 0.1),
    ("aym", "mid", 500, 0.7, 0.1),
    ("bzd", "mid", 500, 0.6, 0.2),
    ("cni", "mid", 500, 0.6, 0.1),
    ("shp", "mid", 500, 0.6, 0.1),
    ("czn", "tiny (czn analog)", 50, 0.6, 0.1),
)
# second high-resource pair; only used to pretrain multilingual bases
PRETRAIN_ONLY_TABLE = (("pt", "high-resource (auxiliary)", 5000, 0.5, 0.0),)
REPLICA_DEV = REPLICA_TEST = 100


def replica_languages(seed: int = 0) -> dict[str, SynthLangSpec]:
    table = REPLICA_TABLE + PRETRAIN_ONLY_TABLE
    members = [(code, derive_seed(seed, code), rho) for code, _, _, rho, _ in table]
    specs = make_family(derive_seed(seed, "family"), members, family="synthetic")
    meta = {code: (name, var) for code, name, _, _, var in table}
    return {s.code: SynthLangSpec(s.code, s.seed, s.lexicon, s.suffixes, s.order, s.relatedness,
                                  meta[s.code][0], s.family, meta[s.code][1]) for s in specs}


def _replica_pairs(seed: int, table, scale: float) -> list[ParallelCorpus]:
    langs = replica_languages(seed)
    sentences = template_sentences()
    out = []
    for code, _, train, _, _ in table:
        sizes = (max(1, round(train * scale)), max(1, round(REPLICA_DEV * scale)),
                 max(1, round(REPLICA_TEST * scale)))
        out.append(generate_synth_pair(langs[code], sentences, sizes))
    return out


def make_shared_task_replica(seed: int = 0, scale: float = 1.0) -> list[ParallelCorpus]:
    """One high-resource pair followed by six low-resource pairs.

    ============ ====== ===== =====
    pair         train  dev   test
    ============ ====== ===== =====
    es-en        5,000  100   100
    es-quy       2,000  100   100
    es-aym         500  100   100
    es-bzd         500  100   100
    es-cni         500  100   100
    es-shp         500  100   100
    es-czn          50  100   100
    ============ ====== ===== =====

    ``scale`` multiplies every split size (rounded, minimum 1) for smoke runs.
    """
    return _replica_pairs(seed, REPLICA_TABLE, scale)


def make_pretraining_suite(seed: int = 0, scale: float = 1.0) -> list[ParallelCorpus]:
    """High-resource pairs for multilingual bases: the replica's es-en plus es-pt."""
    return (_replica_pairs(seed, REPLICA_TABLE[:1], scale)
            + _replica_pairs(seed, PRETRAIN_ONLY_TABLE, scale))
