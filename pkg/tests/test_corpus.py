import numpy as np
import pytest
from hypothesis import given, strategies as st

from ensgan.corpus import (BOS, EOS, PAD, UNK, CorpusBundle, QRPair, Vocab, build_vocab, canonical,
                           decode, encode, generate_synthetic_corpus, load_pairs_tsv, pad_batch,
                           partition_sizes, read_pairs_tsv, strip_special, tokenize, _QUERY_GLUE,
                           _RESPONSE_GLUE)
from ensgan.errors import ContractError


@pytest.mark.parametrize("text,tokens", [
    ("Hello there!", ["hello", "there", "!"]),
    ("", []),
    ("A  b\tc", ["a", "b", "c"]),
    ("what's up?", ["what", "'", "s", "up", "?"]),
])
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def test_vocab_truncation_and_reserved_ids():
    v = build_vocab(["a a b"], max_size=5)
    assert "a" in v and "b" not in v and len(v) == 5
    assert [v.id(t) for t in ("<pad>", "<bos>", "<eos>", "<unk>")] == [PAD, BOS, EOS, UNK] == [0, 1, 2, 3]


def test_vocab_tie_break_is_lexicographic():
    v = build_vocab(["zeta alpha mid", "mid"], max_size=10)
    assert v.id("mid") < v.id("alpha") < v.id("zeta")


def test_vocab_too_small():
    with pytest.raises(ContractError):
        build_vocab(["a"], max_size=4)


def test_encode_decode():
    v = build_vocab(["the cat sat on the mat"])
    ids = encode("the cat sat", v)
    assert ids[-1] == EOS and decode(ids, v) == "the cat sat"
    assert encode("the dog", v) == (v.id("the"), UNK, EOS)
    assert decode(ids + (v.id("mat"), v.id("cat")), v) == "the cat sat"
    with pytest.raises(IndexError):
        decode((len(v),), v)


def test_encode_respects_cap():
    v = build_vocab(["a b c d e f"])
    ids = encode("a b c d e f", v, cap=4)
    assert len(ids) == 4 and ids[-1] == EOS


def test_strip_and_canonical():
    assert strip_special((BOS, 5, PAD, 6, EOS, 7)) == (5, 6)
    assert canonical((5, 6)) == canonical((5, 6, EOS, EOS, 9)) == (5, 6, EOS)


def test_qrpair_invariants():
    with pytest.raises(ContractError):
        QRPair((4, 5), (6, EOS), 0)
    with pytest.raises(ContractError):
        QRPair((4, PAD, EOS), (6, EOS), 0)
    with pytest.raises(ContractError):
        QRPair((), (6, EOS), 0)


def test_tsv_loading(tmp_path):
    v = build_vocab(["hi there", "hello you"])
    f = tmp_path / "p.tsv"
    f.write_text("hi\tthere\nno tab here\nhello\tyou\n", encoding="utf-8")
    pairs, bad = load_pairs_tsv(f, v)
    assert bad == [2]
    assert [decode(p.query, v) for p in pairs] == ["hi", "hello"]
    assert [p.pair_id for p in pairs] == [0, 1]
    empty = tmp_path / "e.tsv"
    empty.write_text("")
    assert read_pairs_tsv(empty) == ([], [])
    with pytest.raises(OSError):
        read_pairs_tsv(tmp_path / "missing.tsv")


def test_partition_sizes():
    assert partition_sizes(1000, (0.6, 0.2, 0.1, 0.1)) == [600, 200, 100, 100]
    assert partition_sizes(1003, (0.6, 0.2, 0.1, 0.1)) == [603, 200, 100, 100]


def test_synthetic_corpus_partition_sizes():
    b = generate_synthetic_corpus(0, n_pairs=1000, ratios=(0.6, 0.2, 0.1, 0.1))
    assert [len(p) for p in b.partitions().values()] == [600, 200, 100, 100]


def test_synthetic_corpus_is_deterministic(tmp_path):
    for d in ("a", "b"):
        generate_synthetic_corpus(7, n_pairs=300).save(tmp_path / d)
    for name in ("retrieval.tsv", "ranking.tsv", "generation.tsv", "test.tsv", "vocab.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_corpus_partitions_disjoint(small_corpus):
    ids = [{p.pair_id for p in part} for part in small_corpus.partitions().values()]
    assert sum(map(len, ids)) == len(set().union(*ids))


def test_topics_use_their_own_response_words():
    b = generate_synthetic_corpus(3, n_pairs=400, n_topics=2)
    glue = {b.vocab.id(w) for w in _RESPONSE_GLUE + _QUERY_GLUE} | {b.vocab.id("."), b.vocab.id("?")}
    words = {0: set(), 1: set()}
    for part in b.partitions().values():
        for p in part:
            words[p.topic] |= set(strip_special(p.response)) - glue
    assert words[0] and words[1] and not words[0] & words[1]


def test_corpus_round_trip(tmp_path, small_corpus):
    small_corpus.save(tmp_path)
    back = CorpusBundle.load(tmp_path)
    assert back.vocab.tokens == small_corpus.vocab.tokens
    for part in CorpusBundle.PARTS:
        assert [(p.query, p.response) for p in getattr(back, part)] == \
               [(p.query, p.response) for p in getattr(small_corpus, part)]
    header = (tmp_path / "vocab.txt").read_text().splitlines()[0]
    assert header.startswith("#") and "line index + 4" in header


def test_overlapping_partitions_rejected():
    v = build_vocab(["a b"])
    p = QRPair((4, EOS), (5, EOS), 0)
    with pytest.raises(ContractError):
        CorpusBundle((p,), (p,), (), (), v)


@pytest.mark.parametrize("kw", [{"n_pairs": 19}, {"n_topics": 1}, {"paraphrases_per_topic": 1}])
def test_generator_preconditions(kw):
    with pytest.raises(ContractError):
        generate_synthetic_corpus(0, **kw)


def test_pad_batch_mask_by_length():
    ids, mask = pad_batch([(4, 0, EOS), (5,)])
    np.testing.assert_array_equal(ids, [[4, 0, EOS], [5, PAD, PAD]])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])


@given(st.lists(st.sampled_from(["cat", "sat", "on", "the", "mat", "dog"]), min_size=1, max_size=8))
def test_decode_inverts_encode(words):
    v = build_vocab(["the cat sat on the mat"])
    text = " ".join(words)
    ids = encode(text, v)
    assert all(i < v.max_size for i in ids)
    if all(w in v for w in words):
        assert decode(ids, v) == text
