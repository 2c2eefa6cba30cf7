"""chrF scoring (character n-gram F-score, beta=2 by default).

Statistics are clipped n-gram match counts per order, so corpus scores are
micro-averages: sum the per-segment :class:`NGramStats`, then apply the F
formula once.

Degenerate orders: a string shorter than ``n`` contributes zero totals at
that order.  An order empty on both sides is left out of the precision and
recall means (so identical short strings still score 100); otherwise zero
hypothesis total means precision 0 and zero reference total recall 0.  If
every order is empty on both sides the score is 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "ChrFConfig",
    "NGramStats",
    "AlignmentError",
    "ngram_stats",
    "chrf_from_stats",
    "chrf_segment",
    "chrf_corpus",
]


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ChrFConfig:
    order: int = 6
    beta: float = 2.0
    remove_whitespace: bool = True

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"n-gram order must be >= 1, got {self.order}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class NGramStats:
    """Per-order (matched, hypothesis total, reference total) counts."""

    matched: tuple[int, ...]
    hyp_total: tuple[int, ...]
    ref_total: tuple[int, ...]

    def __add__(self, other: "NGramStats") -> "NGramStats":
        return NGramStats(
            tuple(a + b for a, b in zip(self.matched, other.matched)),
            tuple(a + b for a, b in zip(self.hyp_total, other.hyp_total)),
            tuple(a + b for a, b in zip(self.ref_total, other.ref_total)),
        )

    @classmethod
    def zero(cls, order: int) -> "NGramStats":
        z = (0,) * order
        return cls(z, z, z)

    def per_order(self):
        return list(zip(self.matched, self.hyp_total, self.ref_total))


def _prepare(s: str, remove_whitespace: bool) -> str:
    return "".join(s.split()) if remove_whitespace else s


def _ngrams(s: str, n: int) -> Counter:
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def ngram_stats(hyp: str, ref: str, config: ChrFConfig = ChrFConfig()) -> NGramStats:
    hyp = _prepare(hyp, config.remove_whitespace)
    ref = _prepare(ref, config.remove_whitespace)
    matched, ht, rt = [], [], []
    for n in range(1, config.order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matched.append(sum((h & r).values()))
        ht.append(max(len(hyp) - n + 1, 0))
        rt.append(max(len(ref) - n + 1, 0))
    return NGramStats(tuple(matched), tuple(ht), tuple(rt))


def chrf_from_stats(stats: NGramStats, beta: float = 2.0) -> float:
    """F-beta over the mean per-order precision and recall, on a 0-100 scale."""
    live = [(m, h, r) for m, h, r in stats.per_order() if h or r]
    if not live:
        return 0.0
    prec = sum(m / h if h else 0.0 for m, h, _ in live) / len(live)
    rec = sum(m / r if r else 0.0 for m, _, r in live) / len(live)
    if prec == 0.0 and rec == 0.0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf_segment(hyp: str, ref: str, config: ChrFConfig = ChrFConfig()) -> float:
    return chrf_from_stats(ngram_stats(hyp, ref, config), config.beta)


def chrf_corpus(hyps: Sequence[str] | Iterable[tuple[str, str]],
                refs: Sequence[str] | None = None,
                config: ChrFConfig = ChrFConfig()) -> float:
    """Corpus chrF from summed statistics.

    Accepts either ``(hyps, refs)`` as parallel lists or a single list of
    ``(hyp, ref)`` pairs.
    """
    if refs is None:
        pairs = list(hyps)
    else:
        hyps, refs = list(hyps), list(refs)
        if len(hyps) != len(refs):
            raise AlignmentError(f"{len(hyps)} hypotheses vs {len(refs)} references")
        pairs = list(zip(hyps, refs))
    if not pairs:
        raise ValueError("chrf_corpus needs at least one segment")
    total = NGramStats.zero(config.order)
    for h, r in pairs:
        total = total + ngram_stats(h, r, config)
    return chrf_from_stats(total, config.beta)
