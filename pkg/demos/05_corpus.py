"""Parallel corpora: synthetic related languages, files on disk and size tables."""
import math
import tempfile
from pathlib import Path

from mtlab.corpus import (load_corpus, make_family, make_shared_task_replica, read_manifest,
                          save_corpus, source_words, stats, table1_manifest, write_manifest)

# the published shared-task sizes ship with the package
print(stats(table1_manifest()).render())

# a reproducible stand-in: synthetic Spanish-to-X pairs of the same shape
replica = make_shared_task_replica(seed=0)
print(stats(replica).render())
quy = replica[1]
for src, tgt in quy.train[:3]:
    print(f"  {src}  ->  {tgt}")

# relatedness controls how many lexicon entries two languages share
a, b = make_family(42, [("xa", 1, 0.8), ("xb", 2, 0.8)])
shared = sum(a.lexicon[w] == b.lexicon[w] for w in a.lexicon)
print(f"shared lexicon entries at relatedness 0.8: {shared} = ceil(0.8 * {len(source_words())})"
      f" = {math.ceil(0.8 * len(source_words()))}")

with tempfile.TemporaryDirectory() as tmp:
    entry = save_corpus(quy, Path(tmp) / "es-quy")
    write_manifest([entry], Path(tmp) / "corpora.manifest")
    (back,) = read_manifest(Path(tmp) / "corpora.manifest")
    print("manifest round trip:", back.load() == quy)
    src, tgt = entry.paths["dev"]
    print("line-aligned dev files load back:", load_corpus(src, tgt, split="dev").dev == quy.dev)
