import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivt.text import (
    CLS, MASK, PAD, SEP, UNK, RESERVED_TOKENS, Vocab, build_vocab, normalize_tokens, split_levels, tokenize,
)


def test_reserved_ids_are_fixed():
    assert (CLS, SEP, PAD, UNK, MASK) == (0, 1, 2, 3, 4)
    vocab = build_vocab(["x"])
    assert [vocab.lookup(t) for t in RESERVED_TOKENS] == [0, 1, 2, 3, 4]


def test_build_vocab_counts():
    vocab = build_vocab(["a red coat", "a red bag"])
    assert vocab.size == 9
    assert vocab.tokens[5:] == ["a", "bag", "coat", "red"]


def test_build_vocab_min_count():
    vocab = build_vocab(["a red coat", "a red bag"], min_count=2)
    assert vocab.size == 7
    assert set(vocab.tokens[5:]) == {"a", "red"}


def test_build_vocab_empty():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([])


def test_normalization_strips_punctuation_and_case():
    assert normalize_tokens("The Woman, wears RED!") == ["the", "woman", "wears", "red"]


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["a man with a blue bag", "black shoes"])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == vocab
    assert (tmp_path / "vocab.txt").read_text().splitlines()[:5] == list(RESERVED_TOKENS)


def _vocab_red_coat():
    return Vocab.from_tokens([*RESERVED_TOKENS, "red", "coat"])


def test_tokenize_empty():
    assert tokenize("", _vocab_red_coat(), 4).ids == (0, 1, 2, 2)


def test_tokenize_known_and_unknown():
    vocab = _vocab_red_coat()
    assert vocab.lookup("red") == 5 and vocab.lookup("coat") == 6
    assert tokenize("red coat", vocab, 4).ids == (0, 5, 6, 1)
    assert tokenize("red zzz", vocab, 4).ids == (0, 5, 3, 1)


def test_tokenize_truncates_keeping_sep():
    ids = tokenize("red coat red coat", _vocab_red_coat(), 4).ids
    assert ids == (0, 5, 6, 1)


def test_tokenize_rejects_tiny_max_len():
    with pytest.raises(ValueError):
        tokenize("red", _vocab_red_coat(), 2)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60), st.integers(3, 20))
def test_tokenize_is_total_with_fixed_length(text, max_len):
    vocab = _vocab_red_coat()
    seq = tokenize(text, vocab, max_len)
    assert len(seq.ids) == max_len
    assert seq.ids[0] == CLS and SEP in seq.ids
    sep = seq.ids.index(SEP)
    assert all(i == PAD for i in seq.ids[sep + 1:])
    assert seq == tokenize(text, vocab, max_len)


def test_split_levels_example():
    levels = split_levels("The woman wears an orange coat, black pants.")
    assert levels.sentence == ["The woman wears an orange coat, black pants."]
    assert levels.phrase == ["The woman wears an orange coat", "black pants"]
    for w in ["woman", "orange", "coat", "black", "pants"]:
        assert w in levels.word
    assert "the" not in levels.word and "wears" not in levels.word


def test_split_levels_single_word():
    levels = split_levels("red")
    assert (levels.sentence, levels.phrase, levels.word) == (["red"], ["red"], ["red"])


def test_split_levels_word_fallback():
    assert split_levels("a b", pos_lexicon={}).word == ["a b"]


def test_split_levels_dedupes_in_first_occurrence_order():
    assert split_levels("red coat, red bag").word == ["red", "coat", "bag"]


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("abc red,.; ")), min_size=1, max_size=40).filter(lambda s: s.strip()))
def test_split_levels_never_empty(text):
    levels = split_levels(text)
    for name in ("sentence", "phrase", "word"):
        assert levels[name]
