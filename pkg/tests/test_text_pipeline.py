import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiplex_embed.errors import ConfigError
from multiplex_embed.text_pipeline import (CLS, PAD, UNK, Vocabulary, build_vocabulary, detokenize,
                                           encode_corpus, encode_text, stack_sequences, tokenize)


@pytest.fixture
def ab_vocab():
    return build_vocabulary(["a b", "a"])


def test_vocabulary_frequency_order(ab_vocab):
    assert ab_vocab.tokens == ("[PAD]", "[CLS]", "[UNK]", "a", "b")
    assert ab_vocab.id_of("a") == 3


def test_min_freq_threshold():
    vocab = build_vocabulary(["a b", "a"], min_freq=2)
    assert vocab.tokens[3:] == ("a",)


def test_equal_frequency_tie_goes_to_lexicographic_order():
    vocab = build_vocabulary(["zeta alpha", "mid"])
    assert vocab.tokens[3:] == ("alpha", "mid", "zeta")


def test_max_size_caps_vocabulary():
    vocab = build_vocabulary(["a a a b b c"], max_size=5)
    assert vocab.tokens[3:] == ("a", "b")


def test_encode_basic(ab_vocab):
    seq = encode_text(ab_vocab, "a b", max_len=4)
    assert seq.ids == (CLS, 3, 4, PAD)
    assert seq.attn_len == 3


def test_all_oov_truncates(ab_vocab):
    seq = encode_text(ab_vocab, "z z z", max_len=3)
    assert seq.ids == (CLS, UNK, UNK)
    assert seq.attn_len == 3


def test_empty_text_is_cls_only(ab_vocab):
    seq = encode_text(ab_vocab, "", max_len=5)
    assert seq.ids == (CLS, PAD, PAD, PAD, PAD)
    assert seq.attn_len == 1


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Hello, World_x 42!") == ["hello", "world", "x", "42"]


def test_vocab_save_load_roundtrip(tmp_path, ab_vocab):
    ab_vocab.save(tmp_path / "v.tsv")
    assert Vocabulary.load(tmp_path / "v.tsv") == ab_vocab


def test_bad_max_len(ab_vocab):
    with pytest.raises(ConfigError):
        encode_text(ab_vocab, "a", max_len=0)


def test_stack_and_corpus_agree(ab_vocab):
    texts = ["a", "b a b", ""]
    ids, lengths = stack_sequences([encode_text(ab_vocab, t, 4) for t in texts])
    ids2, lengths2 = encode_corpus(ab_vocab, texts, 4)
    assert (ids == ids2).all() and (lengths == lengths2).all()
    assert lengths.tolist() == [2, 4, 1]


words = st.lists(st.sampled_from(["alpha", "beta", "gamma", "delta"]), max_size=12)


@settings(max_examples=60, deadline=None)
@given(words, st.integers(2, 10))
def test_length_invariants(tokens, max_len):
    vocab = build_vocabulary(["alpha beta gamma"])
    seq = encode_text(vocab, " ".join(tokens), max_len)
    assert 1 <= seq.attn_len <= max_len
    assert len(seq.ids) == max_len
    assert all(i == PAD for i in seq.ids[seq.attn_len:])
    assert seq == encode_text(vocab, " ".join(tokens), max_len)


@settings(max_examples=60, deadline=None)
@given(words)
def test_detokenize_roundtrip(tokens):
    vocab = build_vocabulary(["alpha beta gamma delta"])
    seq = encode_text(vocab, " ".join(tokens), max_len=len(tokens) + 2)
    assert detokenize(vocab, seq) == tokens
