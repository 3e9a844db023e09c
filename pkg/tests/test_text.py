"""Vocabulary, tokenization round-trips, and tf-idf."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwbias.text import (
    N_RESERVED,
    RESERVED,
    Vocab,
    VocabError,
    build_vocab,
    normalize,
    tfidf_scores,
)

CORPUS = [
    "bako demo rila sotu",
    "demo vanu kipo bako",
    "rila sotu bako mivo demo",
    "kipo vanu lemo sotu rila",
    "mivo lemo bako demo",
]


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(CORPUS, 60)


def test_normalize_lowercases_and_strips_punctuation():
    assert normalize("  Hello,   WORLD!x | y ") == "hello world x y"


def test_tokenize_empty_text(vocab):
    assert vocab.tokenize("") == []


def test_tokenize_round_trip_on_corpus(vocab):
    for text in CORPUS:
        assert vocab.detokenize(vocab.tokenize(text)) == normalize(text)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abdeiklmnoprstuv ", max_size=40))
def test_tokenize_round_trip_property(s):
    vocab = build_vocab(CORPUS, 60)
    assert vocab.detokenize(vocab.tokenize(s)) == normalize(s)


def test_whole_unit_word_tokenizes_to_one_id():
    vocab = build_vocab(["ab ab ab ab"] * 3, N_RESERVED + 3 + 1)
    ids = vocab.tokenize("ab")
    assert len(ids) == 1
    assert vocab.units[ids[0]] == "ab"


def test_unknown_character_names_the_character(vocab):
    with pytest.raises(VocabError, match="'z'"):
        vocab.tokenize("zzz")


def test_build_vocab_creates_most_frequent_merge():
    vocab = build_vocab(["ab ab ab"], N_RESERVED + 3 + 1)  # alphabet: a, b, space
    assert vocab.units[-1] == "ab"


def test_build_vocab_is_deterministic():
    v1 = build_vocab(CORPUS, 80)
    v2 = build_vocab(CORPUS, 80)
    assert v1.units == v2.units
    assert v1.content_hash == v2.content_hash


def test_reserved_ids_distinct_and_never_tokenized(vocab):
    assert vocab.units[:N_RESERVED] == RESERVED
    ids = vocab.tokenize("pad sop sot eot " + "".join(RESERVED))
    assert all(i >= N_RESERVED for i in ids)


def test_build_vocab_rejects_too_small_target():
    with pytest.raises(VocabError, match="below"):
        build_vocab(CORPUS, 5)


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(VocabError, match="empty"):
        build_vocab(["", "   "], 50)


def test_detokenize_rejects_reserved_by_default(vocab):
    with pytest.raises(VocabError, match="reserved"):
        vocab.detokenize([vocab.sop_id])
    assert vocab.detokenize([vocab.sop_id], skip_reserved=True) == ""


def test_vocab_save_load_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded.units == vocab.units
    assert loaded.content_hash == vocab.content_hash


def test_tfidf_word_in_every_document_scores_zero():
    table = tfidf_scores(["bako demo", "bako rila", "bako sotu"])
    assert table.get("bako") == 0.0
    assert table.get("demo") > 0.0


def test_tfidf_single_document_all_zero():
    table = tfidf_scores(["x y"])
    assert table.get("x") == 0.0
    assert table.get("y") == 0.0


def test_tfidf_three_document_hand_computation():
    table = tfidf_scores(["a a b", "a c", "b c d"])
    # tf(a)=3, df(a)=2; tf(b)=2, df(b)=2; tf(d)=1, df(d)=1
    assert math.isclose(table.get("a"), 3 * math.log(3 / 2))
    assert math.isclose(table.get("b"), 2 * math.log(3 / 2))
    assert math.isclose(table.get("d"), 1 * math.log(3 / 1))
    assert table.get("missing") == 0.0
    assert "missing" not in table.scores


def test_tfidf_scores_nonnegative():
    table = tfidf_scores(CORPUS)
    assert all(v >= 0 for v in table.scores.values())
