"""Tokenization: byte-level ids for the language model, word tokens for BM25.

The LM vocabulary is fixed at 260 ids: 0..255 are raw byte values, 256..259
are the specials (BOS, EOS, PAD, SEP). Byte-level encoding means every
string is representable and encode/decode round-trips exactly.
"""

import unicodedata

VOCAB_SIZE = 260
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
SEP_ID = 259

SPECIAL_IDS = (BOS_ID, EOS_ID, PAD_ID, SEP_ID)

from .errors import InvalidId


def encode_bytes(text: str) -> list[int]:
    """Encode text as one token id per UTF-8 byte. No specials are inserted."""
    return list(text.encode("utf-8"))


def decode_bytes(ids) -> str:
    """Inverse of encode_bytes. Invalid UTF-8 runs become U+FFFD.

    Raises InvalidId for any id outside 0..255; callers strip specials first.
    """
    out = bytearray()
    for i in ids:
        i = int(i)
        if i >= VOCAB_SIZE:
            raise InvalidId(f"token id {i} outside vocabulary of {VOCAB_SIZE}")
        if i >= 256:
            raise InvalidId(f"special token id {i} cannot be decoded as text")
        out.append(i)
    return out.decode("utf-8", errors="replace")


def strip_specials(ids) -> list[int]:
    return [int(i) for i in ids if int(i) < 256]


# Prompt fragments shared by the online pipeline and the pretraining corpus
# builder, so the base model sees the exact inference-time rendering.
QUESTION_PROMPT = "Question: {question}\nAnswer:"
PASSAGE_PROMPT = "Passage {index}: {text}\n"


def render_question(question: str) -> str:
    return QUESTION_PROMPT.format(question=question)


def render_passage(index: int, text: str) -> str:
    return PASSAGE_PROMPT.format(index=index, text=text)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens
