import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assertgen.tokenizer import (
    CLS_TOKEN,
    COMMENT_TOKEN,
    DEFAULT_SPECIALS,
    EOS_TOKEN,
    NEWLINE_TOKEN,
    TokenizerError,
    deserialize_tokenizer,
    load_tokenizer,
    save_tokenizer,
    serialize_tokenizer,
    tokenizer_fingerprint,
    train_bpe,
)
from tests.conftest import make_corpus


@pytest.fixture(scope="module")
def tok():
    corpus = make_corpus(
        [
            ("getValue ( obj )", "assertEquals ( expected , actual )"),
            ("getValue ( other )", "assertEquals ( expected , other )"),
            ("isEmpty ( list )", "assertTrue ( result )"),
            ("isEmpty ( set )", "assertFalse ( result )"),
        ]
    )
    return train_bpe(corpus, vocab_size=120)


def test_specials_occupy_lowest_ids(tok):
    for i, s in enumerate(DEFAULT_SPECIALS):
        assert tok.vocab[s] == i
    assert tok.cls_id == 0
    assert tok.eos_id == 1
    assert tok.pad_id == 2


def test_round_trip_on_training_text(tok):
    text = "assertEquals ( expected , actual )"
    assert tok.decode(tok.encode(text)) == text


def test_merges_compress_frequent_words(tok):
    # "assertEquals" appears four times across both sides; it should not
    # decompose into single characters.
    assert len(tok.encode("assertEquals")) < len("assertEquals") + 1


def test_unknown_characters_become_unk(tok):
    ids = tok.encode("§")
    assert tok.unk_id in ids


def test_specials_encode_to_reserved_ids(tok):
    ids = tok.encode(f"{CLS_TOKEN} getValue {NEWLINE_TOKEN} {COMMENT_TOKEN} obj")
    assert ids[0] == tok.cls_id
    assert tok.newline_id in ids
    assert tok.comment_id in ids
    # decode drops [CLS] but keeps the content-bearing specials
    assert tok.decode(ids) == f"getValue {NEWLINE_TOKEN} {COMMENT_TOKEN} obj"


def test_decode_drops_pad_eos_cls(tok):
    ids = tok.encode("assertTrue ( result )")
    padded = [tok.cls_id] + ids + [tok.eos_id, tok.pad_id, tok.pad_id]
    assert tok.decode(padded) == "assertTrue ( result )"


def test_decode_rejects_out_of_range(tok):
    with pytest.raises(TokenizerError, match="out of range"):
        tok.decode([tok.vocab_size])


def test_encode_truncates_to_max_len(tok):
    full = tok.encode("assertEquals ( expected , actual )")
    assert tok.encode("assertEquals ( expected , actual )", max_len=3) == full[:3]
    with pytest.raises(TokenizerError):
        tok.encode("x", max_len=0)


def test_training_is_deterministic():
    corpus = make_corpus([("alpha ( beta )", "assertSame ( beta , alpha )")])
    a = train_bpe(corpus, vocab_size=60)
    b = train_bpe(corpus, vocab_size=60)
    assert serialize_tokenizer(a) == serialize_tokenizer(b)
    assert tokenizer_fingerprint(a) == tokenizer_fingerprint(b)


def test_vocab_budget_is_respected(copy_bench):
    tok = train_bpe(copy_bench.train, vocab_size=80)
    assert tok.vocab_size <= 80


def test_vocab_floor_enforced():
    corpus = make_corpus([("abc ( d )", "assertTrue ( d )")])
    with pytest.raises(TokenizerError, match="below"):
        train_bpe(corpus, vocab_size=5)


def test_serialize_round_trip(tok, tmp_path):
    save_tokenizer(tok, tmp_path / "tok.txt")
    loaded = load_tokenizer(tmp_path / "tok.txt")
    assert loaded.vocab == tok.vocab
    assert loaded.merges == tok.merges
    assert tokenizer_fingerprint(loaded) == tokenizer_fingerprint(tok)
    text = "assertEquals ( expected , actual )"
    assert loaded.encode(text) == tok.encode(text)


def test_deserialize_rejects_malformed():
    with pytest.raises(TokenizerError):
        deserialize_tokenizer("V banana\n")
    good = serialize_tokenizer(train_bpe(make_corpus([("a ( b )", "assertTrue ( b )")]), 40))
    tampered = good.replace("V ", "V 9", 1)
    with pytest.raises(TokenizerError, match="declared"):
        deserialize_tokenizer(tampered)


def test_fingerprint_distinguishes_vocabularies(copy_bench):
    small = train_bpe(copy_bench.train, vocab_size=60)
    large = train_bpe(copy_bench.train, vocab_size=120)
    assert tokenizer_fingerprint(small) != tokenizer_fingerprint(large)


@settings(max_examples=30, deadline=None)
@given(
    words=st.lists(
        st.text(alphabet="var013(),", min_size=1, max_size=8).filter(str.strip),
        min_size=1,
        max_size=6,
    )
)
def test_round_trip_over_trained_alphabet(words, copy_bench):
    tok = train_bpe(copy_bench.train, vocab_size=100)
    text = " ".join(words)
    covered = all(ch in tok.vocab for word in words for ch in word)
    if covered:
        assert tok.decode(tok.encode(text)) == " ".join(text.split())
