"""chrF2: character n-gram F-score, micro-averaged over a corpus."""
from mtlab.metrics import ChrFConfig, chrf_corpus, chrf_segment, ngram_stats

# hand-checkable case: bigram order, recall weighted four times precision
cfg = ChrFConfig(order=2, beta=2.0)
print("per-order (matched, hyp, ref):", ngram_stats("ab", "abc", cfg).per_order())
print(f"chrF2(ab, abc) at order 2: {chrf_segment('ab', 'abc', cfg):.2f}")

print("identical:", chrf_segment("kunan", "kunan"), " disjoint:", chrf_segment("abc", "xyz"))
print("whitespace is ignored by default:", chrf_segment("a b c", "abc"))

# the corpus score sums statistics first, so it differs from the mean segment score
pairs = [("abcdefgh", "abcdefgh"), ("x", "y")]
micro = chrf_corpus(pairs)
macro = sum(chrf_segment(h, r) for h, r in pairs) / len(pairs)
print(f"corpus (micro) {micro:.2f} vs mean of segments {macro:.2f}")
