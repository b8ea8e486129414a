import pytest
from hypothesis import given, strategies as st

from kglm.errors import VocabError
from kglm.text import (CLS, EOS, PAD, RESERVED, SEP, UNK, Vocab, build_vocab,
                       load_vocab, normalize, save_vocab)


def test_reserved_ids_fixed():
    v = build_vocab([])
    assert [v.token_for(i) for i in (PAD, UNK, CLS, SEP, EOS)] == list(RESERVED)
    assert len(v) == 5


def test_min_count_filters():
    v = build_vocab(["a a b"], min_count=2)
    assert set(v.tokens[5:]) == {"a"}


def test_frequency_then_alpha_order():
    v = build_vocab(["x y", "y z"], min_count=1)
    assert v.tokens[5:] == ("y", "x", "z")


def test_build_rejects_bad_min_count():
    with pytest.raises(VocabError):
        build_vocab(["a"], min_count=0)


def test_round_trip_in_vocab():
    v = build_vocab(["the cat sat"])
    assert v.decode(v.encode("the cat").ids) == "the cat"


def test_oov_maps_to_unk():
    v = build_vocab(["a"])
    seq = v.encode("zzz")
    assert seq.ids == [UNK]
    assert v.decode(seq.ids) == "[UNK]"


def test_case_and_whitespace_insensitive():
    v = build_vocab(["a b"])
    assert v.encode("A  b").ids == v.encode("a b").ids


def test_decode_rejects_unknown_id():
    v = build_vocab(["a"])
    with pytest.raises(VocabError):
        v.decode([len(v)])


def test_spans_reconstruct_normalized_text():
    v = build_vocab(["new york is big"])
    text = "  New   YORK is  big "
    norm = normalize(text)
    seq = v.encode(text)
    assert [norm[s:e] for s, e in seq.spans] == norm.split()
    # spans are ordered and non-overlapping
    for (s1, e1), (s2, e2) in zip(seq.spans, seq.spans[1:]):
        assert e1 <= s2


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["alpha beta beta gamma"])
    path = tmp_path / "vocab.txt"
    save_vocab(v, str(path))
    assert load_vocab(str(path)) == v
    lines = path.read_text().splitlines()
    assert lines[:5] == list(RESERVED)
    assert lines[5] == "beta"


def test_build_deterministic():
    corpus = ["b a c", "c b", "a"]
    assert build_vocab(corpus) == build_vocab(list(corpus))


words = st.text(alphabet="abcdefg", min_size=1, max_size=5)


@given(st.lists(words, min_size=1, max_size=20, unique=True), st.data())
def test_round_trip_property(tokens, data):
    v = build_vocab([" ".join(tokens)])
    sentence = " ".join(data.draw(
        st.lists(st.sampled_from(tokens), min_size=1, max_size=10)))
    assert v.decode(v.encode(sentence).ids) == sentence


@given(st.text(alphabet="abc XY\t\n", max_size=40))
def test_spans_tile_normalized_input(text):
    v = build_vocab([text])
    norm = normalize(text)
    seq = v.encode(text)
    assert " ".join(norm[s:e] for s, e in seq.spans) == norm
