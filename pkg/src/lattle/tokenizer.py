"""Word-level tokenizer over serialized rows.

Text is lowercased and split on whitespace; a trailing ``.`` is split off
each word as its own token, so ``"Age is 25."`` becomes
``["age", "is", "25", "."]``.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable

from .errors import VocabularyError

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
DEFAULT_MAX_LEN = 1024


def split_words(text: str) -> list[str]:
    tokens = []
    for word in text.lower().split():
        if len(word) > 1 and word.endswith("."):
            tokens.append(word[:-1])
            tokens.append(".")
        else:
            tokens.append(word)
    return tokens


class Vocabulary:
    def __init__(self, tokens: list[str], max_sequence_length: int = DEFAULT_MAX_LEN):
        if tuple(tokens[:3]) != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved tokens PAD, UNK, CLS")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.max_sequence_length = max_sequence_length

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return encode(self, text)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != PAD_ID)

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.tokens)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path, max_sequence_length: int = DEFAULT_MAX_LEN) -> "Vocabulary":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not _:
                raise VocabularyError(f"line {lineno}: expected token<TAB>id")
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise VocabularyError("vocabulary ids are not contiguous from 0")
        return cls([tok for _, tok in pairs], max_sequence_length)


def build_vocab(corpus: Iterable[str], min_freq: int = 1,
                max_sequence_length: int = DEFAULT_MAX_LEN) -> Vocabulary:
    """Vocabulary ordered by (frequency desc, token asc) after the reserved ids."""
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(split_words(text))
    if n_docs == 0:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    kept = [tok for tok, n in counts.items() if n >= min_freq and tok not in RESERVED]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED) + kept, max_sequence_length)


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Token ids for ``text``; unknown words map to UNK, truncated to the length limit."""
    ids = [vocab.index.get(tok, UNK_ID) for tok in split_words(text)]
    return ids[: vocab.max_sequence_length]
