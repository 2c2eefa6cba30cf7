import random
import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlab.tokenizer import TrainingError, Vocab, VocabError, tag_token, train_bpe


def naive_bpe(corpus, n_merges):
    """Recount every pair from scratch before each merge."""
    seqs = [[bytes([b]) for b in s.encode()] for s in corpus]
    merges = []
    for _ in range(n_merges):
        counts = {}
        for seq in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        candidates = [(-c, p) for p, c in counts.items() if c >= 2]
        if not candidates:
            break
        best = min(candidates)[1]
        merges.append(best)
        new = []
        for seq in seqs:
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(seq[i] + seq[i + 1])
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            new.append(out)
        seqs = new
    return merges


def replay_encode(merges, text):
    """Apply merges one at a time in training order."""
    seq = [bytes([b]) for b in text.encode()]
    for a, b in merges:
        out, i = [], 0
        while i < len(seq):
            if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(seq[i])
                i += 1
        seq = out
    return seq


SENTENCES = [
    "the cat sat on the mat", "a cat and a hat", "kunan p'unchaw", "ñuqa rini",
    "ë ä ö tsëkë", "banana bandana", "aaaa bbbb aaaa", "mississippi", "abababab",
]


@pytest.fixture(scope="module")
def small_vocab():
    return train_bpe(SENTENCES * 3, 3 + 2 + 256 + 40, ["quy", "aym"])


def test_single_candidate_merge():
    v = train_bpe(["aaaa"], 3 + 256 + 1)
    assert v.merges == ((b"a", b"a"),)


def test_abab_merges_ab_first():
    v = train_bpe(["abab", "abab"], 3 + 256 + 5)
    assert v.merges[0] == (b"a", b"b")


def test_abab_encodes_to_two_subwords():
    v = Vocab((), ((b"a", b"b"),))
    assert len(v.subwords("abab")) == 2


def test_budget_respected(small_vocab):
    assert len(small_vocab) <= 3 + 2 + 256 + 40
    assert len(train_bpe(SENTENCES, 300)) <= 300


def test_stops_when_no_pair_repeats():
    v = train_bpe(["abc"], 1000)
    assert v.merges == ()


def test_matches_naive_oracle(small_vocab):
    assert list(small_vocab.merges) == naive_bpe(SENTENCES * 3, 40)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcñ ", max_size=12), min_size=1, max_size=8),
       st.integers(1, 12))
def test_matches_naive_oracle_property(corpus, n):
    assert list(train_bpe(corpus, 259 + n).merges) == naive_bpe(corpus, n)


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="abcñ ë", max_size=30))
def test_min_rank_encoding_equals_replay(small_vocab, text):
    ids = small_vocab.subwords(text)
    assert [small_vocab.token(i) for i in ids] == replay_encode(small_vocab.merges, text)


def test_permuted_corpus_same_merges():
    corpus = SENTENCES * 2
    shuffled = corpus[:]
    random.Random(3).shuffle(shuffled)
    assert train_bpe(corpus, 330).merges == train_bpe(shuffled, 330).merges


def test_training_errors():
    with pytest.raises(TrainingError):
        train_bpe([], 400)
    with pytest.raises(TrainingError):
        train_bpe(["abc"], 3 + 1 + 256, ["quy"])


def test_id_layout(small_vocab):
    v = small_vocab
    assert (v.pad_id, v.bos_id, v.eos_id) == (0, 1, 2)
    assert v.token(3) == tag_token("quy") and v.tag_id("aym") == 4
    assert v.token(5) == b"\x00" and v.token(5 + 255) == b"\xff"
    assert v.token(5 + 256) == b"".join(v.merges[0])


def test_encode_modes(small_vocab):
    v = small_vocab
    assert v.encode("", "quy") == [v.tag_id("quy"), v.eos_id]
    assert v.encode("", None) == [v.bos_id, v.eos_id]
    body = v.subwords("cat")
    assert v.encode("cat", "aym") == [v.tag_id("aym"), *body, v.eos_id]


def test_unknown_language(small_vocab):
    with pytest.raises(VocabError, match="xyz"):
        small_vocab.encode("a", "xyz")


def test_decode_strips_controls(small_vocab):
    v = small_vocab
    assert v.decode([v.bos_id, v.eos_id]) == ""
    ids = v.subwords("hat")
    assert v.decode([v.eos_id, *ids[:1], v.pad_id, v.tag_id("quy"), *ids[1:], v.bos_id]) == "hat"


def test_decode_out_of_range(small_vocab):
    with pytest.raises(VocabError):
        small_vocab.decode([len(small_vocab)])
    with pytest.raises(VocabError):
        small_vocab.decode([-1])


def test_round_trip_random_bytes(small_vocab):
    rnd = random.Random(0)
    for _ in range(1000):
        data = bytes(rnd.randrange(256) for _ in range(rnd.randrange(40)))
        assert small_vocab.decode_bytes(small_vocab.encode(data)) == data


def test_round_trip_combining_diacritics(small_vocab):
    text = unicodedata.normalize("NFD", "Ñuñoa tsë̈kë kʉ̀ʉ̀ Chá̱tino ä")
    assert small_vocab.decode(small_vocab.encode(text, "quy")) == text


def test_serialization_round_trip(small_vocab, tmp_path):
    path = tmp_path / "v.bpe"
    small_vocab.save(path)
    back = Vocab.load(path)
    assert back.merges == small_vocab.merges
    assert back.language_codes == small_vocab.language_codes
    assert back.dumps() == small_vocab.dumps()
    assert path.read_bytes() == back.dumps().encode()


def test_serialization_format(small_vocab):
    lines = small_vocab.dumps().splitlines()
    assert lines[0] == "mtlab-bpe v1 languages=quy,aym"
    a, b = small_vocab.merges[0]
    assert lines[1] == f"{a.hex()} {b.hex()}"


def test_bad_vocab_file():
    with pytest.raises(VocabError):
        Vocab.loads("something else\n")
    with pytest.raises(VocabError, match="line 2"):
        Vocab.loads("mtlab-bpe v1 languages=\n6162\n")
