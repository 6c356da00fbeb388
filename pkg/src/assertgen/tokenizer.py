"""Byte-pair-encoding tokenizer for space-separated code token streams.

Pre-tokenization splits on whitespace because the corpora are already
normalized to space-separated code tokens.  Each pre-token is a symbol
sequence of its characters plus an explicit end-of-word sentinel, and merges
are learned greedily by pair frequency.  Six special tokens are reserved
below all learned ids: the sequence marker [CLS], the end marker [EOS],
padding [PAD], the unknown-character token [UNK], the explicit line break
"\\n" used when assembling augmented inputs, and the comment marker "//".
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

CLS_TOKEN = "[CLS]"
EOS_TOKEN = "[EOS]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
NEWLINE_TOKEN = "\\n"
COMMENT_TOKEN = "//"

DEFAULT_SPECIALS = (CLS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN, NEWLINE_TOKEN, COMMENT_TOKEN)

END_OF_WORD = "</w>"

DEFAULT_VOCAB_SIZE = 8000


class TokenizerError(ValueError):
    """Raised for invalid tokenizer configuration or out-of-range ids."""


@dataclass
class Tokenizer:
    """A trained BPE tokenizer: merge rules plus the token-string vocabulary.

    ``vocab`` maps token string to id, densely 0..V-1, with specials first,
    then the sorted base alphabet, then merge outputs in training order.
    """

    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    specials: tuple[str, ...]
    alphabet: tuple[str, ...]
    _id_to_token: list[str] = field(default_factory=list, repr=False)
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)
    _word_cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._id_to_token:
            self._id_to_token = [""] * len(self.vocab)
            for token, idx in self.vocab.items():
                self._id_to_token[idx] = token
        if not self._ranks:
            self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}
        self._special_set = set(self.specials)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def cls_id(self) -> int:
        return self.vocab[CLS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.vocab[EOS_TOKEN]

    @property
    def pad_id(self) -> int:
        return self.vocab[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK_TOKEN]

    @property
    def newline_id(self) -> int:
        return self.vocab[NEWLINE_TOKEN]

    @property
    def comment_id(self) -> int:
        return self.vocab[COMMENT_TOKEN]

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols: list[str | None] = []
        for ch in word:
            # Characters outside the training alphabet become [UNK] markers
            # that never participate in merges.
            symbols.append(ch if ch in self.vocab else None)
        symbols.append(END_OF_WORD)
        while len(symbols) > 1:
            best_rank = None
            best_at = -1
            for i in range(len(symbols) - 1):
                a, b = symbols[i], symbols[i + 1]
                if a is None or b is None:
                    continue
                rank = self._ranks.get((a, b))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_at = i
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            merged: list[str | None] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        ids = tuple(
            self.unk_id if s is None else self.vocab[s] for s in symbols
        )
        self._word_cache[word] = ids
        return ids

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """Encode whitespace-separated text into token ids.

        Special token strings encode to their reserved ids; other pre-tokens
        go through the learned merges.  The result is truncated to
        ``max_len`` ids when given.
        """
        if max_len is not None and max_len < 1:
            raise TokenizerError(f"max_len must be >= 1, got {max_len}")
        ids: list[int] = []
        for word in text.split():
            if word in self._special_set:
                ids.append(self.vocab[word])
            else:
                ids.extend(self._encode_word(word))
            if max_len is not None and len(ids) >= max_len:
                return ids[:max_len]
        return ids

    def decode(self, ids: list[int] | tuple[int, ...]) -> str:
        """Map ids back to text, dropping [PAD], [EOS], and [CLS].

        Learned tokens are concatenated until an end-of-word sentinel closes
        the word; content-bearing specials ("\\n", "//", [UNK]) stand alone.
        """
        drop = {self.pad_id, self.eos_id, self.cls_id}
        words: list[str] = []
        buffer = ""
        for i in ids:
            if not 0 <= i < len(self._id_to_token):
                raise TokenizerError(f"id {i} out of range for vocab of {len(self._id_to_token)}")
            if i in drop:
                continue
            token = self._id_to_token[i]
            if token in self._special_set:
                if buffer:
                    words.append(buffer)
                    buffer = ""
                words.append(token)
            elif token.endswith(END_OF_WORD):
                words.append(buffer + token[: -len(END_OF_WORD)])
                buffer = ""
            else:
                buffer += token
        if buffer:
            words.append(buffer)
        return " ".join(w for w in words if w)


def _word_frequencies(corpus) -> Counter:
    freqs: Counter = Counter()
    for pair in corpus:
        freqs.update(pair.focal_test.split())
        freqs.update(pair.assertion.split())
    return freqs


def train_bpe(
    corpus,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    specials: tuple[str, ...] = DEFAULT_SPECIALS,
) -> Tokenizer:
    """Train a BPE tokenizer on both sides of a corpus.

    Merges are chosen greedily by pair frequency, ties broken by the
    lexicographically smallest pair, and training stops when the vocabulary
    budget is exhausted or no pair occurs at least twice.  The result is a
    pure function of the corpus text and the arguments.
    """
    freqs = _word_frequencies(corpus)
    alphabet = sorted({ch for word in freqs for ch in word} | {END_OF_WORD})
    floor = len(specials) + len(alphabet)
    if vocab_size < floor:
        raise TokenizerError(
            f"vocab_size {vocab_size} is below {len(specials)} specials + "
            f"{len(alphabet)} base symbols = {floor}"
        )
    for s in specials:
        if s in alphabet:
            raise TokenizerError(f"special token {s!r} collides with a base symbol")

    vocab: dict[str, int] = {}
    for s in specials:
        vocab[s] = len(vocab)
    for ch in alphabet:
        vocab[ch] = len(vocab)

    words: list[tuple[list[str], int]] = [
        (list(word) + [END_OF_WORD], count) for word, count in sorted(freqs.items())
    ]

    pair_counts: Counter = Counter()
    for symbols, count in words:
        for i in range(len(symbols) - 1):
            pair_counts[(symbols[i], symbols[i + 1])] += count

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        best_pair = None
        best_count = 1
        for pair, count in pair_counts.items():
            if count > best_count or (count == best_count and (best_pair is None or pair < best_pair)):
                best_pair = pair
                best_count = count
        if best_pair is None:
            break
        a, b = best_pair
        merged_token = a + b
        for symbols, count in words:
            i = 0
            while i < len(symbols) - 1:
                if symbols[i] == a and symbols[i + 1] == b:
                    if i > 0:
                        pair_counts[(symbols[i - 1], a)] -= count
                        pair_counts[(symbols[i - 1], merged_token)] += count
                    if i < len(symbols) - 2:
                        pair_counts[(b, symbols[i + 2])] -= count
                    symbols[i : i + 2] = [merged_token]
                    if i < len(symbols) - 1:
                        pair_counts[(merged_token, symbols[i + 1])] += count
                else:
                    i += 1
        del pair_counts[best_pair]
        merges.append(best_pair)
        if merged_token not in vocab:
            vocab[merged_token] = len(vocab)

    return Tokenizer(
        merges=merges,
        vocab=vocab,
        specials=tuple(specials),
        alphabet=tuple(alphabet),
    )


def serialize_tokenizer(tok: Tokenizer) -> str:
    """Render a tokenizer as its canonical text form.

    No symbol may contain whitespace (pre-tokenization guarantees this), so
    fields are space-separated and records are line-separated.
    """
    lines = [
        f"V {tok.vocab_size}",
        "specials " + " ".join(tok.specials),
        "alphabet " + " ".join(tok.alphabet),
        f"merges {len(tok.merges)}",
    ]
    lines.extend(f"{a} {b}" for a, b in tok.merges)
    return "\n".join(lines) + "\n"


def save_tokenizer(tok: Tokenizer, path: str | Path) -> None:
    Path(path).write_text(serialize_tokenizer(tok), encoding="utf-8", newline="\n")


def tokenizer_fingerprint(tok: Tokenizer) -> str:
    """Content hash of the canonical text form, for compatibility checks."""
    return hashlib.sha256(serialize_tokenizer(tok).encode("utf-8")).hexdigest()


def deserialize_tokenizer(text: str) -> Tokenizer:
    lines = text.splitlines()
    try:
        declared_v = int(lines[0].split(" ", 1)[1])
        specials = tuple(lines[1].split(" ")[1:])
        alphabet = tuple(lines[2].split(" ")[1:])
        n_merges = int(lines[3].split(" ", 1)[1])
        merge_lines = lines[4 : 4 + n_merges]
    except (IndexError, ValueError) as exc:
        raise TokenizerError(f"malformed tokenizer file: {exc}") from exc
    if len(merge_lines) != n_merges:
        raise TokenizerError(f"expected {n_merges} merge lines, found {len(merge_lines)}")

    vocab: dict[str, int] = {}
    for s in specials:
        vocab[s] = len(vocab)
    for ch in alphabet:
        vocab[ch] = len(vocab)
    merges: list[tuple[str, str]] = []
    for line in merge_lines:
        a, b = line.split(" ")
        merges.append((a, b))
        merged = a + b
        if merged not in vocab:
            vocab[merged] = len(vocab)
    if len(vocab) != declared_v:
        raise TokenizerError(f"declared V {declared_v} but reconstructed {len(vocab)} tokens")
    return Tokenizer(merges=merges, vocab=vocab, specials=specials, alphabet=alphabet)


def load_tokenizer(path: str | Path) -> Tokenizer:
    """Reload a saved tokenizer; bit-exact inverse of save_tokenizer."""
    return deserialize_tokenizer(Path(path).read_text(encoding="utf-8"))
