"""Byte-level BPE with target-language tags, and its lossless round trip."""
import unicodedata

from mtlab.tokenizer import Vocab, train_bpe

corpus = ["imaynallam kachkanki", "allinmi kachkani", "kamisaki jumax", "walikiw nayax"] * 3
vocab = train_bpe(corpus, 300, ["quy", "aym"])
print(f"{len(vocab)} ids, first merges:", vocab.merges[:5])

ids = vocab.encode("allinmi kachkanki", "quy")
print("encoded with the quy tag:", ids)
print("decoded:", vocab.decode(ids))

# any byte string survives, including decomposed diacritics
text = unicodedata.normalize("NFD", "Ñuñoa tsë̈kë")
assert vocab.decode(vocab.encode(text, "aym")) == text
assert vocab.decode_bytes(vocab.encode(b"\xff\x00\xfe")) == b"\xff\x00\xfe"
print("round trip holds for NFD text and raw bytes")

print("serialized header:", vocab.dumps().splitlines()[0])
assert Vocab.loads(vocab.dumps()).dumps() == vocab.dumps()
