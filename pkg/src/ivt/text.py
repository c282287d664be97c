"""Caption tokenization and sentence/phrase/word level splitting."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

CLS, SEP, PAD, UNK, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]")

IMAGE_TYPE, TEXT_TYPE = 0, 1

PHRASE_SEPARATORS = ".,;"
CONTENT_TAGS = frozenset({"NOUN", "ADJ"})

_WORD_RE = re.compile(r"[^\w\s]")


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    return _WORD_RE.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocab:
    token_to_id: Mapping[str, int]

    def __post_init__(self):
        for i, tok in enumerate(RESERVED_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must have id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocab ids must be contiguous from 0")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @property
    def tokens(self) -> list[str]:
        return sorted(self.token_to_id, key=self.token_to_id.__getitem__)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocab":
        return cls({tok: i for i, tok in enumerate(tokens)})

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(lines)


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocab:
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter(tok for text in corpus for tok in normalize_tokens(text))
    words = sorted(w for w, c in counts.items() if c >= min_count and w not in RESERVED_TOKENS)
    return Vocab.from_tokens([*RESERVED_TOKENS, *words])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    modality: str = "text"
    type_id: int = TEXT_TYPE
    positions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.positions:
            object.__setattr__(self, "positions", tuple(range(len(self.ids))))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def real_positions(self) -> list[int]:
        """Positions holding caption tokens (not CLS, SEP or PAD)."""
        return [i for i, t in enumerate(self.ids) if t not in (CLS, SEP, PAD)]


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    words = normalize_tokens(text)[: max_len - 2]
    ids = [CLS, *(vocab.lookup(w) for w in words), SEP]
    ids += [PAD] * (max_len - len(ids))
    return TokenSequence(tuple(ids))


@dataclass(frozen=True)
class TextLevels:
    sentence: list[str]
    phrase: list[str]
    word: list[str]

    def __getitem__(self, level: str) -> list[str]:
        return getattr(self, level)


def split_phrases(text: str) -> list[str]:
    parts = re.split(f"[{re.escape(PHRASE_SEPARATORS)}]", text)
    return [p.strip() for p in parts if p.strip()]


def split_levels(text: str, pos_lexicon: Mapping[str, str] | None = None) -> TextLevels:
    """Split a caption into the three alignment levels.

    Words are kept when the lexicon tags them NOUN or ADJ; anything missing
    from the lexicon counts as OTHER.  Empty levels fall back to the level
    above so every level is non-empty for non-empty input.
    """
    lexicon = DEFAULT_POS_LEXICON if pos_lexicon is None else pos_lexicon
    sentence = text.strip()
    phrase = split_phrases(sentence) or [sentence]
    seen: dict[str, None] = {}
    for tok in normalize_tokens(sentence):
        if lexicon.get(tok, "OTHER") in CONTENT_TAGS:
            seen.setdefault(tok)
    word = list(seen) or list(phrase)
    return TextLevels(sentence=[sentence], phrase=phrase, word=word)


COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "black", "white")

_NOUNS = (
    "person", "man", "woman", "lady", "pedestrian", "hair", "ponytail", "top", "shirt",
    "jacket", "coat", "sweater", "pants", "trousers", "shorts", "skirt", "jeans", "shoes",
    "sneakers", "boots", "bag", "backpack", "handbag", "clothes", "hat", "logo",
)
_ADJS = COLORS + ("grey", "gray", "brown", "pink", "dark", "light", "long", "short", "small", "large")
_OTHER = {
    "a": "DET", "an": "DET", "the": "DET", "with": "ADP", "in": "ADP", "and": "CONJ",
    "wears": "VERB", "wearing": "VERB", "carries": "VERB", "carrying": "VERB", "has": "VERB",
    "is": "VERB", "they": "PRON", "she": "PRON", "he": "PRON", "of": "ADP", "on": "ADP",
}

DEFAULT_POS_LEXICON: dict[str, str] = {
    **{w: "NOUN" for w in _NOUNS},
    **{w: "ADJ" for w in _ADJS},
    **_OTHER,
}
