import json
import math

import numpy as np
import pytest

from prag.errors import EmptyCorpus
from prag.retriever import (
    Corpus,
    Document,
    bm25_score,
    build_index,
    content_hash,
    doc_tokens,
    load_index,
    retrieve_top_k,
    save_index,
)
from prag.text import tokenize_words


def make_corpus(texts):
    return Corpus([Document(doc_id=i + 1, title="", text=t) for i, t in enumerate(texts)])


def brute_force_rank(corpus, index, query_text, k):
    """Independent oracle: score every doc with the Okapi formula, sort, cut."""
    query = tokenize_words(query_text)
    results = []
    for pos, doc in enumerate(corpus.docs):
        tokens = doc_tokens(doc)
        counts = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        score = 0.0
        for term in query:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            df = len(index.postings.get(term, ()))
            idf = math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))
            norm = index.k1 * (1 - index.b + index.b * len(tokens) / index.avg_doc_length)
            score += idf * (tf * (index.k1 + 1)) / (tf + norm)
        if score > 0.0:
            results.append((doc.doc_id, score))
    results.sort(key=lambda item: (-item[1], item[0]))
    return results[:k]


def test_content_hash_stable_and_unique():
    assert content_hash("t", "x") == content_hash("t", "x")
    assert content_hash("t", "x") != content_hash("t", "y")
    assert 0 <= content_hash("a", "b") < 2**64


def test_build_index_counts():
    index = build_index(make_corpus(["a a b"]))
    assert dict(index.postings["a"]) == {0: 2}
    assert dict(index.postings["b"]) == {0: 1}
    assert index.avg_doc_length == 3.0


def test_identical_docs_share_postings():
    index = build_index(make_corpus(["same words here", "same words here"]))
    for term in ("same", "words", "here"):
        assert [pos for pos, _ in index.postings[term]] == [0, 1]


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpus):
        build_index(Corpus([]))


def test_index_df_matches_brute_force():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(30)]
    texts = [" ".join(rng.choice(vocab, size=rng.integers(3, 20)))
             for _ in range(100)]
    corpus = make_corpus(texts)
    index = build_index(corpus)
    for term in vocab:
        expected = sum(1 for t in texts if term in t.split())
        assert len(index.postings.get(term, ())) == expected


def test_absent_terms_contribute_zero():
    index = build_index(make_corpus(["x y", "x", "z"]))
    assert bm25_score(index, ["nope"], 0) == 0.0
    assert bm25_score(index, ["nope", "missing"], 1) == 0.0


def test_score_monotone_in_tf():
    # with b=0 the length norm vanishes; tf saturation is monotone
    index = build_index(make_corpus(["x", "y"]), k1=500.0, b=0.0)
    idf = index.idf("x")
    scores = [idf * (tf * 501.0) / (tf + 500.0) for tf in (1, 2, 5, 50)]
    assert scores == sorted(scores)
    assert scores[-1] < idf * 501.0  # saturates below the k1+1 asymptote


def test_hand_evaluated_three_doc_scores():
    corpus = make_corpus(["x y", "x", "z"])
    index = build_index(corpus, k1=1.2, b=0.75)
    # hand evaluation: N=3, df("x")=2 -> idf = ln(1 + 1.5/2.5)
    idf = math.log(1.0 + (3 - 2 + 0.5) / (2 + 0.5))
    avg = (2 + 1 + 1) / 3
    for pos, length in ((0, 2), (1, 1)):
        norm = 1.2 * (1 - 0.75 + 0.75 * length / avg)
        expected = idf * (1 * 2.2) / (1 + norm)
        assert bm25_score(index, ["x"], pos) == pytest.approx(expected, rel=1e-12)
    assert bm25_score(index, ["x"], 2) == 0.0


def test_unique_match_ranks_first():
    corpus = make_corpus(["alpha beta", "gamma delta", "epsilon zeta"])
    result = retrieve_top_k(build_index(corpus), "gamma", 3)
    assert result.ranked[0][0] == 2


def test_tie_broken_by_ascending_id():
    corpus = make_corpus(["twin text", "twin text", "other words"])
    result = retrieve_top_k(build_index(corpus), "twin", 3)
    assert result.doc_ids() == [1, 2]


def test_zero_score_docs_excluded():
    corpus = make_corpus(["only here", "nothing else"])
    result = retrieve_top_k(build_index(corpus), "only", 5)
    assert result.doc_ids() == [1]
    assert len(retrieve_top_k(build_index(corpus), "absent term", 5)) == 0


def test_rankings_match_brute_force_oracle():
    rng = np.random.default_rng(42)
    vocab = [f"t{i}" for i in range(50)]
    corpus = make_corpus([" ".join(rng.choice(vocab, size=rng.integers(2, 30)))
                          for _ in range(100)])
    index = build_index(corpus)
    for _ in range(20):
        query = " ".join(rng.choice(vocab, size=rng.integers(1, 5)))
        got = retrieve_top_k(index, query, 10).ranked
        expected = brute_force_rank(corpus, index, query, 10)
        assert got == expected  # bit-exact in fp64


def test_index_round_trips_through_json(tmp_path):
    corpus = make_corpus(["alpha beta gamma", "beta beta", "gamma alpha"])
    index = build_index(corpus)
    path = tmp_path / "index.json"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded == index


def test_corpus_jsonl_round_trip(tmp_path):
    corpus = Corpus([Document(doc_id=7, title="T", text="body text")])
    path = tmp_path / "corpus.jsonl"
    corpus.to_jsonl(path)
    loaded = Corpus.from_jsonl(path)
    assert loaded.docs == corpus.docs


def test_corpus_ingestion_hashes_when_id_absent(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"title": "t", "text": "x"}) + "\n")
    corpus = Corpus.from_jsonl(path)
    assert corpus.docs[0].doc_id == content_hash("t", "x")
