"""Byte-level BPE with padding/boundary tokens and per-language target tags.

Id layout (dense, 0-based)::

    0 PAD, 1 BOS, 2 EOS, 3.. one tag per language code, then the 256 bytes,
    then one id per learned merge in training order.

Source sentences are encoded as ``[tag(lang), subwords..., EOS]`` so the
decoder is told which language to produce; targets as
``[BOS, subwords..., EOS]``.  Whitespace is an ordinary byte.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "Vocab",
    "VocabError",
    "TrainingError",
    "train_bpe",
    "tag_token",
]

PAD, BOS, EOS = "<pad>", "<s>", "</s>"
_FORMAT = "mtlab-bpe v1"


class VocabError(KeyError):
    """Unknown language code or token id."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class TrainingError(ValueError):
    pass


def tag_token(code: str) -> str:
    return f"<2{code}>"


@dataclass(frozen=True, eq=False)
class Vocab:
    """Immutable BPE vocabulary.

    ``merges`` holds pairs of byte strings in the order they were learned.
    """

    language_codes: tuple[str, ...]
    merges: tuple[tuple[bytes, bytes], ...]
    _symbols: tuple[bytes, ...] = field(init=False, repr=False)
    _ids: dict = field(init=False, repr=False)
    _ranks: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.language_codes)) != len(self.language_codes):
            raise VocabError(f"duplicate language codes: {self.language_codes}")
        symbols = [bytes([b]) for b in range(256)]
        ranks = {}
        for i, (a, b) in enumerate(self.merges):
            symbols.append(a + b)
            ranks[(a, b)] = i
        ids = {}
        for i, s in enumerate(symbols):
            ids.setdefault(s, self.num_control + i)
        object.__setattr__(self, "_symbols", tuple(symbols))
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_ranks", ranks)
        # per-instance cache; vocab is immutable so this is safe to share
        object.__setattr__(self, "_encode_cached", lru_cache(maxsize=200_000)(self._encode_bytes))

    # -- ids ---------------------------------------------------------------

    pad_id = 0
    bos_id = 1
    eos_id = 2

    @property
    def control_tokens(self) -> tuple[str, ...]:
        return (PAD, BOS, EOS) + tuple(tag_token(c) for c in self.language_codes)

    @property
    def num_control(self) -> int:
        return 3 + len(self.language_codes)

    def __len__(self) -> int:
        return self.num_control + len(self._symbols)

    @property
    def size(self) -> int:
        return len(self)

    def tag_id(self, code: str) -> int:
        try:
            return 3 + self.language_codes.index(code)
        except ValueError:
            raise VocabError(f"unknown language code {code!r}") from None

    def token(self, i: int) -> str | bytes:
        """Control token name or the byte string a subword id stands for."""
        if not 0 <= i < len(self):
            raise VocabError(f"token id {i} outside [0, {len(self)})")
        if i < self.num_control:
            return self.control_tokens[i]
        return self._symbols[i - self.num_control]

    # -- encoding ----------------------------------------------------------

    def _encode_bytes(self, data: bytes) -> tuple[int, ...]:
        syms = [bytes([b]) for b in data]
        ranks = self._ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, out, i = best[0] + best[1], [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            syms = out
        return tuple(self._ids[s] for s in syms)

    def subwords(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(self._encode_cached(data))

    def encode(self, text: str | bytes, lang: str | None = None) -> list[int]:
        """Encode as a source (``lang`` given) or target (``lang=None``) sequence."""
        body = self.subwords(text)
        if lang is None:
            return [self.bos_id, *body, self.eos_id]
        return [self.tag_id(lang), *body, self.eos_id]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = []
        n = len(self)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise VocabError(f"token id {i} outside [0, {n})")
            if i >= self.num_control:
                out.append(self._symbols[i - self.num_control])
        return b"".join(out)

    def decode(self, ids: Iterable[int]) -> str:
        """Strip control tokens and reassemble text; bad UTF-8 becomes U+FFFD."""
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- serialisation -----------------------------------------------------

    def dumps(self) -> str:
        lines = [f"{_FORMAT} languages={','.join(self.language_codes)}"]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        # identical files share one instance and hence one encode cache
        if cls is Vocab:
            return _loads_shared(text)
        return cls._parse(text)

    @classmethod
    def _parse(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        head = lines[0].split(" ")
        if " ".join(head[:2]) != _FORMAT or len(head) != 3 or not head[2].startswith("languages="):
            raise VocabError(f"not a vocab file header: {lines[0]!r}")
        langs = head[2][len("languages="):]
        codes = tuple(langs.split(",")) if langs else ()
        merges = []
        for ln, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise VocabError(f"line {ln}: expected two hex symbols")
            merges.append((bytes.fromhex(parts[0]), bytes.fromhex(parts[1])))
        return cls(codes, tuple(merges))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps().encode("ascii"))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.loads(Path(path).read_bytes().decode("ascii"))


@lru_cache(maxsize=32)
def _loads_shared(text: str) -> Vocab:
    return Vocab._parse(text)


def train_bpe(corpus: Sequence[str | bytes], target_vocab_size: int = 512,
              language_codes: Sequence[str] = ()) -> Vocab:
    """Learn merges greedily by pair frequency.

    Stops when the vocabulary reaches ``target_vocab_size`` or no adjacent
    pair occurs at least twice.  Frequency ties go to the lexicographically
    smaller ``(left, right)`` byte-string pair, so the result depends only on
    the multiset of sentences.
    """
    codes = tuple(language_codes)
    base = 3 + len(codes) + 256
    if target_vocab_size <= base:
        raise TrainingError(f"target_vocab_size must exceed {base}, got {target_vocab_size}")
    if not corpus:
        raise TrainingError("cannot train BPE on an empty corpus")

    counts = Counter(s.encode("utf-8") if isinstance(s, str) else bytes(s) for s in corpus)
    seqs: list[list[bytes]] = []
    weights: list[int] = []
    for data, w in sorted(counts.items()):
        seqs.append([bytes([b]) for b in data])
        weights.append(w)

    pair_counts: Counter = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for k, syms in enumerate(seqs):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += weights[k]
            where[pair].add(k)

    merges: list[tuple[bytes, bytes]] = []
    while base + len(merges) < target_vocab_size:
        best = None
        best_count = 1
        for pair, c in pair_counts.items():
            if c > best_count or (c == best_count and best is not None and pair < best):
                best, best_count = pair, c
        if best is None:
            break
        merges.append(best)
        _apply_merge(best, seqs, weights, pair_counts, where)
    return Vocab(codes, tuple(merges))


def _apply_merge(best, seqs, weights, pair_counts, where) -> None:
    """Merge ``best`` in every sequence, updating pair counts locally.

    Each non-overlapping occurrence at ``p`` retires (a, b) and its left pair
    and creates (left, ab); its right pair is only rewritten when the next
    symbols are not themselves an occurrence, since that occurrence's left
    side covers the shared pair.
    """
    a, b = best
    merged = a + b
    for k in sorted(where.pop(best, ())):
        syms, w = seqs[k], weights[k]
        n = len(syms)
        positions = []
        j = 0
        while True:
            try:
                j = syms.index(a, j)
            except ValueError:
                break
            if j + 1 < n and syms[j + 1] == b:
                positions.append(j)
                j += 2
            else:
                j += 1
        if not positions:
            continue
        starts = set(positions)
        out: list[bytes] = []
        prev_end = 0
        for p in positions:
            out.extend(syms[prev_end:p])
            _bump(pair_counts, (a, b), -w)
            if p > 0:
                _bump(pair_counts, (syms[p - 1], a), -w)
                left = out[-1]
                pair_counts[(left, merged)] += w
                where[(left, merged)].add(k)
            if p + 2 < n and (p + 2) not in starts:
                right = syms[p + 2]
                _bump(pair_counts, (b, right), -w)
                pair_counts[(merged, right)] += w
                where[(merged, right)].add(k)
            out.append(merged)
            prev_end = p + 2
        out.extend(syms[prev_end:])
        seqs[k] = out


def _bump(counts, pair, delta) -> None:
    c = counts[pair] + delta
    if c > 0:
        counts[pair] = c
    else:
        del counts[pair]
