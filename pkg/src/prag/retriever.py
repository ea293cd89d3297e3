"""BM25 lexical retrieval over the document corpus.

Okapi BM25 with the non-negative IDF form ln(1 + (N - df + 0.5)/(df + 0.5)).
Scores are computed in fp64, term-at-a-time, so rankings are bit-identical
to a brute-force score-every-document scan.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

from .errors import EmptyCorpus
from .text import tokenize_words

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 3


def content_hash(title: str, text: str) -> int:
    """Stable 64-bit id derived from document content; re-ingestion is idempotent."""
    h = hashlib.blake2b(digest_size=8)
    h.update(title.encode("utf-8"))
    h.update(b"\x00")
    h.update(text.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def _parse_doc_id(raw: str) -> int:
    try:
        value = int(raw, 16)
    except ValueError:
        return int.from_bytes(hashlib.blake2b(raw.encode("utf-8"), digest_size=8).digest(), "little")
    if 0 <= value < 2**64:
        return value
    raise ValueError(f"doc id {raw!r} out of 64-bit range")


@dataclass(frozen=True)
class Document:
    doc_id: int
    title: str
    text: str


@dataclass
class Corpus:
    docs: list[Document] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {}
        for doc in self.docs:
            if doc.doc_id in self._by_id:
                raise ValueError(f"duplicate doc id {doc.doc_id:#018x}")
            self._by_id[doc.doc_id] = doc

    def __len__(self):
        return len(self.docs)

    def get(self, doc_id: int) -> Document | None:
        return self._by_id.get(doc_id)

    @classmethod
    def from_records(cls, records) -> "Corpus":
        docs = []
        for rec in records:
            title = rec.get("title", "")
            text = rec["text"]
            raw_id = rec.get("id")
            doc_id = _parse_doc_id(raw_id) if raw_id is not None else content_hash(title, text)
            docs.append(Document(doc_id=doc_id, title=title, text=text))
        return cls(docs)

    @classmethod
    def from_jsonl(cls, path) -> "Corpus":
        with open(path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(records)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in self.docs:
                fh.write(json.dumps(
                    {"id": f"{doc.doc_id:016x}", "title": doc.title, "text": doc.text},
                    ensure_ascii=False) + "\n")


def doc_tokens(doc: Document) -> list[str]:
    """Token stream indexed for a document: title tokens then body tokens."""
    source = f"{doc.title} {doc.text}" if doc.title else doc.text
    return tokenize_words(source)


@dataclass(frozen=True)
class InvertedIndex:
    """Immutable posting lists plus the statistics BM25 needs."""

    postings: dict  # term -> tuple of (doc position, term frequency)
    doc_lengths: tuple
    doc_ids: tuple
    avg_doc_length: float
    doc_count: int
    k1: float
    b: float

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def term_contribution(self, term: str, tf: int, doc_length: int) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * doc_length / self.avg_doc_length)
        return self.idf(term) * (tf * (self.k1 + 1.0)) / (tf + norm)


@dataclass(frozen=True)
class RetrievalResult:
    ranked: list  # (doc_id, score), descending score, ties by ascending doc id

    def doc_ids(self) -> list[int]:
        return [doc_id for doc_id, _ in self.ranked]

    def __len__(self):
        return len(self.ranked)


def build_index(corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> InvertedIndex:
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    if not k1 > 0:
        raise ValueError("k1 must be positive")
    if not 0 <= b <= 1:
        raise ValueError("b must lie in [0, 1]")

    postings: dict[str, list] = {}
    lengths = []
    for pos, doc in enumerate(corpus.docs):
        tokens = doc_tokens(doc)
        lengths.append(len(tokens))
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for tok, tf in counts.items():
            postings.setdefault(tok, []).append((pos, tf))

    frozen = {term: tuple(entries) for term, entries in postings.items()}
    return InvertedIndex(
        postings=frozen,
        doc_lengths=tuple(lengths),
        doc_ids=tuple(doc.doc_id for doc in corpus.docs),
        avg_doc_length=sum(lengths) / len(lengths),
        doc_count=len(lengths),
        k1=k1,
        b=b,
    )


def bm25_score(index: InvertedIndex, query_tokens, doc_pos: int) -> float:
    """Okapi BM25 score of one document for a tokenized query.

    Terms absent from the document (or the whole index) contribute zero.
    Repeated query terms contribute once per occurrence.
    """
    if not 0 <= doc_pos < index.doc_count:
        raise IndexError(f"doc position {doc_pos} out of range")
    length = index.doc_lengths[doc_pos]
    score = 0.0
    for term in query_tokens:
        tf = 0
        for pos, freq in index.postings.get(term, ()):
            if pos == doc_pos:
                tf = freq
                break
        if tf:
            score += index.term_contribution(term, tf, length)
    return score


def save_index(index: InvertedIndex, path) -> None:
    body = {
        "k1": index.k1,
        "b": index.b,
        "doc_count": index.doc_count,
        "avg_doc_length": index.avg_doc_length,
        "doc_lengths": list(index.doc_lengths),
        "doc_ids": [f"{doc_id:016x}" for doc_id in index.doc_ids],
        "postings": {term: [list(e) for e in entries]
                     for term, entries in index.postings.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, ensure_ascii=False)


def load_index(path) -> InvertedIndex:
    with open(path, encoding="utf-8") as fh:
        body = json.load(fh)
    return InvertedIndex(
        postings={term: tuple((pos, tf) for pos, tf in entries)
                  for term, entries in body["postings"].items()},
        doc_lengths=tuple(body["doc_lengths"]),
        doc_ids=tuple(int(h, 16) for h in body["doc_ids"]),
        avg_doc_length=body["avg_doc_length"],
        doc_count=body["doc_count"],
        k1=body["k1"],
        b=body["b"],
    )


def retrieve_top_k(index: InvertedIndex, query_text: str, k: int = DEFAULT_TOP_K) -> RetrievalResult:
    """Top-k documents by BM25, zero-score docs excluded, ties by ascending id.

    Accumulates term-at-a-time in query order, which makes per-document sums
    bit-identical to brute-force scoring in fp64.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = tokenize_words(query_text)
    scores: dict[int, float] = {}
    for term in query:
        entries = index.postings.get(term)
        if not entries:
            continue
        for pos, tf in entries:
            contribution = index.term_contribution(term, tf, index.doc_lengths[pos])
            scores[pos] = scores.get(pos, 0.0) + contribution

    candidates = [
        (index.doc_ids[pos], score)
        for pos, score in scores.items()
        if score > 0.0
    ]
    candidates.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(ranked=candidates[:k])
