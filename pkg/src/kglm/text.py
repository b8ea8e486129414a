"""Whitespace tokenizer, vocabulary, and special-token bookkeeping.

Text is normalized to lowercase with single spaces; tokens are the
whitespace-delimited pieces. Ids 0..4 are reserved for [PAD], [UNK],
[CLS], [SEP], [EOS] in that order. [UNK] is a real trainable token, so
held-out words are representable rather than errors.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .errors import VocabError

RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]")
PAD, UNK, CLS, SEP, EOS = range(5)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class TokenizedSequence:
    ids: list[int]
    spans: list[tuple[int, int]]  # char offsets into the normalized text
    text: str = ""  # the normalized source, so spans stay resolvable

    def __post_init__(self):
        assert len(self.ids) == len(self.spans)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(tokens)
        if self.tokens[:5] != RESERVED:
            raise VocabError("first five ids must be the reserved tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise VocabError("duplicate token")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_for(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_for(self, tid: int) -> str:
        if not 0 <= tid < len(self.tokens):
            raise VocabError(f"unknown token id {tid}")
        return self.tokens[tid]

    def encode(self, text: str) -> TokenizedSequence:
        norm = normalize(text)
        ids, spans = [], []
        pos = 0
        for word in norm.split():
            start = norm.index(word, pos)
            end = start + len(word)
            ids.append(self.id_for(word))
            spans.append((start, end))
            pos = end
        return TokenizedSequence(ids, spans, norm)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.token_for(i) for i in ids)


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Count lowercased whitespace tokens; keep those at or above min_count.

    Order is (frequency desc, token asc) so two builds over the same corpus
    are identical.
    """
    if min_count < 1:
        raise VocabError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for text in corpus:
        counts.update(normalize(text).split())
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocab(RESERVED + tuple(kept))


def save_vocab(vocab: Vocab, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def load_vocab(path: str) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocab(tokens)
