import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgattn.data import (
    Document,
    bucket_bounds,
    bucket_by_length,
    detokenize,
    load_packed,
    pack_documents,
    pack_rows,
    read_documents,
    repeated_pattern_docs,
    save_packed,
    tokenize,
)
from lgattn.errors import ContractError
from lgattn.model import BOS, EOS


def test_tokenize_by_hand():
    assert tokenize("") == [] and detokenize([]) == ""
    assert tokenize("A") == [65]
    assert tokenize("é") == [0xC3, 0xA9]
    assert detokenize([BOS, 72, 105, EOS]) == "Hi"


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_round_trip(text):
    ids = tokenize(text)
    assert all(0 <= i < 256 for i in ids)
    assert detokenize(ids) == text


def test_empty_document_rejected():
    with pytest.raises(ContractError):
        Document("", "x")


def test_one_short_document():
    tokens, mask = pack_rows([Document("ab", "d")], seq_len=8)
    assert tokens.tolist() == [[BOS, 97, 98, EOS, 0, 0, 0, 0]]
    assert mask.tolist() == [[True] * 4 + [False] * 4]


def test_two_documents_in_order():
    tokens, _ = pack_rows([Document("a", "1"), Document("bc", "2")], seq_len=8)
    assert tokens[0, :7].tolist() == [BOS, 97, EOS, BOS, 98, 99, EOS]


def test_rows_cut_at_seq_len():
    tokens, mask = pack_rows([Document("abcdefg", "1")], seq_len=4)
    assert tokens.tolist() == [[BOS, 97, 98, 99], [100, 101, 102, 103], [EOS, 0, 0, 0]]
    assert mask.sum() == 9


def test_cross_doc_flag_masks_only_inner_starts():
    docs = [Document("a", "1"), Document("b", "2"), Document("cde", "3")]
    _, plain = pack_rows(docs, seq_len=5)
    _, masked = pack_rows(docs, seq_len=5, mask_cross_doc=True)
    # rows: [BOS a EOS BOS b] [EOS BOS c d e] [EOS ...]
    assert plain.sum() == masked.sum() + 2
    assert not masked[0, 3] and not masked[1, 1] and masked[0, 0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=40), min_size=1, max_size=12), st.integers(3, 50), st.integers(1, 4))
def test_packing_conserves_tokens(texts, seq_len, batch_size):
    docs = [Document(t, str(i)) for i, t in enumerate(texts)]
    batches = list(pack_documents(docs, seq_len, batch_size))
    tokens = np.concatenate([b.tokens for b in batches])
    mask = np.concatenate([b.mask for b in batches])
    expected = [tok for d in docs for tok in [BOS] + tokenize(d.text) + [EOS]]
    assert tokens.shape[1] == seq_len
    assert tokens[mask].tolist() == expected
    assert tokens.size == sum(len(d.tokens()) + 2 for d in docs) + (~mask).sum()
    assert (~mask).sum() < seq_len
    assert all(len(b.tokens) <= batch_size for b in batches)


def test_seq_len_too_small():
    with pytest.raises(ContractError):
        pack_rows([Document("a", "1")], seq_len=2)


def test_bucket_boundaries():
    docs = [Document("x" * 128, "a"), Document("x" * 129, "b"), Document("x", "c"), Document("x" * 256, "d"),
            Document("x" * 257, "e")]
    buckets = bucket_by_length(docs, max_exponent=9)
    assert [(b.min_len, b.max_len) for b in buckets] == [(1, 128), (129, 256), (257, 512)]
    assert buckets[0].doc_ids == ["a", "c"]
    assert buckets[1].doc_ids == ["b", "d"]
    assert buckets[2].doc_ids == ["e"]


def test_bucket_bounds_doubling():
    assert bucket_bounds(7) == [(1, 128)]
    assert bucket_bounds(10)[-1] == (513, 1024)
    with pytest.raises(ContractError):
        bucket_bounds(6)


def test_bucket_overflow_is_an_error():
    with pytest.raises(ContractError):
        bucket_by_length([Document("x" * 129, "a")], max_exponent=7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 2000), min_size=0, max_size=30))
def test_buckets_partition_corpus(lengths):
    docs = [Document("y" * n, str(i)) for i, n in enumerate(lengths)]
    buckets = bucket_by_length(docs)
    ids = [i for b in buckets for i in b.doc_ids]
    assert sorted(ids) == sorted(d.id for d in docs)
    for b in buckets:
        assert all(b.min_len <= lengths[int(i)] <= b.max_len for i in b.doc_ids)
    for lo, hi in zip(buckets, buckets[1:]):
        assert hi.min_len == lo.max_len + 1 and hi.max_len == 2 * lo.max_len


def test_read_documents_file_and_directory(tmp_path):
    f = tmp_path / "corpus.txt"
    f.write_text("first\n\nsecond line\n", encoding="utf-8")
    docs = read_documents(f)
    assert [d.text for d in docs] == ["first", "second line"]
    assert [d.id for d in docs] == ["corpus.txt:1", "corpus.txt:3"]
    d = tmp_path / "dir"
    d.mkdir()
    (d / "b.txt").write_text("two\nlines", encoding="utf-8")
    (d / "a.txt").write_text("one", encoding="utf-8")
    (d / "skip.md").write_text("no", encoding="utf-8")
    assert [(x.id, x.text) for x in read_documents(d)] == [("a.txt", "one"), ("b.txt", "two\nlines")]


def test_packed_file_round_trip(tmp_path):
    tokens, mask = pack_rows(repeated_pattern_docs(5, seed=4), seq_len=33)
    save_packed(tmp_path / "p", tokens, mask, 33)
    t2, m2 = load_packed(tmp_path / "p")
    assert np.array_equal(tokens, t2) and np.array_equal(mask, m2)


def test_repeated_patterns():
    docs = repeated_pattern_docs(3, pattern_len=5, repeats=3, seed=1)
    assert len(docs) == 3 and len({d.id for d in docs}) == 3
    for doc in docs:
        assert doc.text == doc.text[:5] * 3
    assert [d.text for d in docs] == [d.text for d in repeated_pattern_docs(3, pattern_len=5, repeats=3, seed=1)]
