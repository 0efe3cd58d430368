"""WordPiece tokenization with special tokens, pairing, and padding.

Vocabulary files are plain text, one token per line, id = 0-based line
number (compatible with released BERT vocabularies). Subword pieces
that continue a word carry the ``##`` prefix; lookup falls back to
``[UNK]`` for whole words that cannot be covered, so tokenizing never
fails.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DuplicateToken, MissingSpecialToken

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            counts = Counter(self.tokens)
            dupes = [t for t, c in counts.items() if c > 1]
            raise DuplicateToken(f"duplicate tokens: {dupes}")
        missing = [t for t in SPECIAL_TOKENS if t not in self._index]
        if missing:
            raise MissingSpecialToken(f"vocabulary lacks {missing}")
        # A vocabulary with any upper-case (non-special) token is cased,
        # and lookups must then preserve case.
        object.__setattr__(
            self,
            "uncased",
            all(t == t.lower() for t in self.tokens if t not in SPECIAL_TOKENS),
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._index[t] for t in SPECIAL_TOKENS)


@dataclass(frozen=True)
class TokenizedSequence:
    """One encoder input: ids, display tokens, mask, and segments.

    All four lists share one length (the padded sequence length); the
    attention mask is 1 on real tokens and 0 on padding.
    """

    ids: tuple[int, ...]
    tokens: tuple[str, ...]
    attention_mask: tuple[int, ...]
    segment_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def real_length(self) -> int:
        return sum(self.attention_mask)


def load_vocab(path: str | Path) -> Vocabulary:
    """Read a one-token-per-line vocabulary file."""
    with open(path, "r", encoding="utf-8") as handle:
        tokens = [line.rstrip("\n") for line in handle]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tuple(tokens))


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for token in vocab.tokens:
            handle.write(token + "\n")


def basic_tokenize(text: str, uncased: bool = True) -> list[str]:
    """Split text on whitespace with punctuation as standalone tokens."""
    if uncased:
        text = text.lower()
    return _WORD_OR_PUNCT.findall(text)


def wordpiece(word: str, vocab: Vocabulary, max_word_chars: int = 100) -> list[str]:
    """Greedy longest-match-first subword split of a single word.

    Continuation pieces require the ``##`` form. Returns ``[UNK]`` for
    the whole word when any step fails or the word is longer than
    ``max_word_chars``.
    """
    if len(word) > max_word_chars:
        return [UNK]
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary, uncased: bool | None = None) -> list[str]:
    """Full pipeline: basic split then WordPiece on each word.

    Casing follows the vocabulary unless overridden: a cased vocabulary
    keeps case, an all-lowercase one lowercases first.
    """
    if uncased is None:
        uncased = vocab.uncased
    pieces: list[str] = []
    for word in basic_tokenize(text, uncased=uncased):
        pieces.extend(wordpiece(word, vocab))
    return pieces


def _pad(
    tokens: list[str], segments: list[int], vocab: Vocabulary, max_seq_len: int
) -> TokenizedSequence:
    real = len(tokens)
    padded_tokens = tokens + [PAD] * (max_seq_len - real)
    padded_segments = segments + [0] * (max_seq_len - real)
    return TokenizedSequence(
        ids=tuple(vocab.id_of(t) for t in padded_tokens),
        tokens=tuple(padded_tokens),
        attention_mask=tuple([1] * real + [0] * (max_seq_len - real)),
        segment_ids=tuple(padded_segments),
    )


def encode_single(sentence: str, vocab: Vocabulary, max_seq_len: int) -> TokenizedSequence:
    """Encode one sentence as ``[CLS] pieces [SEP]`` padded to length."""
    if max_seq_len < 3:
        raise ValueError("max_seq_len must be >= 3")
    pieces = tokenize(sentence, vocab)[: max_seq_len - 2]
    tokens = [CLS] + pieces + [SEP]
    return _pad(tokens, [0] * len(tokens), vocab, max_seq_len)


def encode_pair(
    sent_a: str, sent_b: str, vocab: Vocabulary, max_seq_len: int
) -> TokenizedSequence:
    """Encode two sentences as ``[CLS] A [SEP] B [SEP]`` padded to length.

    Joint truncation trims tokens from the end of the currently longer
    segment (segment B on ties) until the pair fits.
    """
    if max_seq_len < 5:
        raise ValueError("max_seq_len must be >= 5")
    pieces_a = tokenize(sent_a, vocab)
    pieces_b = tokenize(sent_b, vocab)
    budget = max_seq_len - 3
    while len(pieces_a) + len(pieces_b) > budget:
        if len(pieces_a) > len(pieces_b):
            pieces_a.pop()
        else:
            pieces_b.pop()
    tokens = [CLS] + pieces_a + [SEP] + pieces_b + [SEP]
    segments = [0] * (len(pieces_a) + 2) + [1] * (len(pieces_b) + 1)
    return _pad(tokens, segments, vocab, max_seq_len)


def build_test_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Build a small vocabulary from a corpus, for desk-scale runs.

    The five specials come first, then the most frequent whole words
    until the vocabulary reaches ``target_size`` (frequency ties broken
    lexicographically), then single-character ``##x`` continuations for
    every character seen inside corpus words.
    """
    if target_size <= len(SPECIAL_TOKENS):
        raise ValueError(
            f"target_size must exceed the {len(SPECIAL_TOKENS)} special tokens"
        )
    counts: Counter[str] = Counter()
    chars: set[str] = set()
    for text in corpus:
        for word in basic_tokenize(text):
            counts[word] += 1
            chars.update(word)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    words = [w for w, _ in ranked[: target_size - len(SPECIAL_TOKENS)]]
    continuations = sorted("##" + c for c in chars)
    tokens: list[str] = []
    seen: set[str] = set()
    for token in (*SPECIAL_TOKENS, *words, *continuations):
        if token not in seen:
            seen.add(token)
            tokens.append(token)
    return Vocabulary(tuple(tokens))


def merge_wordpieces(pieces: Sequence[str]) -> str:
    """Undo a WordPiece split by stripping ``##`` and concatenating."""
    return "".join(p[2:] if p.startswith("##") else p for p in pieces)
