"""Whitespace tokenizer: vocabulary, encoding with special tokens, padding.

Tokens are lowercased whitespace chunks. Encoded sequences are a [CLS]
position followed by up to max_len-1 word tokens (UNK for out-of-vocabulary)
and PAD to exactly max_len. UNK positions count as content: they stand for
real words, and only special tokens are excluded from pooling denominators.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
NUM_RESERVED = 3


class TokenizerError(Exception):
    pass


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]
    tokens: tuple[str, ...]  # non-reserved tokens, index = id - NUM_RESERVED

    @property
    def size(self) -> int:
        return len(self.tokens) + NUM_RESERVED

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


@dataclass(frozen=True)
class TokenizedDoc:
    ids: np.ndarray            # int64, length max_len
    content_flags: np.ndarray  # bool, True iff position holds a real word
    n_content: int
    empty: bool = False        # set when the source text had no tokens


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    """Training-split tokens with frequency >= min_freq.

    Ordered by (frequency desc, token asc) so identical token multisets give
    identical vocabularies.
    """
    counts: Counter[str] = Counter()
    for review in corpus.train:
        counts.update(tokenize(review.text))
    kept = sorted((t for t, f in counts.items() if f >= min_freq),
                  key=lambda t: (-counts[t], t))
    mapping = {t: i + NUM_RESERVED for i, t in enumerate(kept)}
    return Vocab(token_to_id=mapping, tokens=tuple(kept))


def encode(text: str, vocab: Vocab, max_len: int) -> TokenizedDoc:
    """[CLS] + first max_len-1 words + PAD to max_len."""
    if max_len < 2:
        raise TokenizerError(f"max_len must be >= 2, got {max_len}")
    words = tokenize(text)
    kept = words[:max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, w in enumerate(kept):
        ids[i + 1] = vocab.id_of(w)
    flags = np.zeros(max_len, dtype=bool)
    flags[1:1 + len(kept)] = True
    return TokenizedDoc(ids=ids, content_flags=flags,
                        n_content=len(kept), empty=len(words) == 0)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """One token per line; line number equals id - 3."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in vocab.tokens:
            fh.write(t + "\n")


def load_vocab(path: str | Path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    mapping = {t: i + NUM_RESERVED for i, t in enumerate(tokens)}
    if len(mapping) != len(tokens):
        raise TokenizerError(f"duplicate tokens in vocab file {path}")
    return Vocab(token_to_id=mapping, tokens=tuple(tokens))
