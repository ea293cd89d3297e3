"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-4 and 10 check the analytic cost/metric formulas exactly.
Criterion 5 is the fp64 gradient check. Criteria 6-9 run the full desk
pipeline: synthetic corpus, base pretraining, per-document adapter training,
and the QA benchmark. Heavy artifacts are built once per session; set
PRAG_TEST_CACHE to a directory to reuse them across runs.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from prag import adapters as A
from prag.augment import (
    build_dataset,
    build_pretrain_text,
    gen_synthetic_corpus,
    gen_warmup_qa,
)
from prag.evaluation import QAItem, f1, run_benchmark
from prag.model import (
    ModelConfig,
    init_params,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
)
from prag.pipeline import Mode, Pipeline
from prag.retriever import build_index, doc_tokens, retrieve_top_k
from prag.store import (
    ParametricCorpus,
    compute_cost_estimate,
    online_saving_estimate,
    storage_estimate,
)
from prag.text import tokenize_words
from prag.trainer import (
    TrainHyper,
    analytic_adapter_grads,
    build_sequence,
    finite_diff_grad,
    reseed_adapter,
    train_adapter,
    warmup_init,
)

# Frozen desk-run settings. Criteria 6/7/9 use the published adapter recipe:
# rank 2, alpha 32, lr 3e-4, one epoch, one rewrite, three QA pairs.
WORLD_SEED = 7
PRETRAIN_SEED = 0
PRETRAIN_TEXT_SEED = 11
WARMUP_SEED = 3
ADAPTER_SEED = 0
NUM_DOCS = 64
TRIPLES_PER_DOC = 3
PRETRAIN_STEPS = 3000
PRETRAIN_LR = 1e-3
ADAPTER_HYPER = dict(learning_rate=3e-4, epochs=1, optimizer="adamw", seed=ADAPTER_SEED)
AUG_N, AUG_M = 1, 3
DESK = ModelConfig()  # 4 layers, 128 hidden, 512 ffn, 4 heads, 512 context

_TIMINGS = {}


def _report(criterion, ok, detail):
    print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _cache_dir():
    root = os.environ.get("PRAG_TEST_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _settings_key(*parts):
    blob = json.dumps(parts, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


@pytest.fixture(scope="session")
def desk_world():
    return gen_synthetic_corpus(NUM_DOCS, TRIPLES_PER_DOC, seed=WORLD_SEED)


@pytest.fixture(scope="session")
def desk_base(desk_world, tmp_path_factory):
    key = _settings_key("base", WORLD_SEED, PRETRAIN_TEXT_SEED, PRETRAIN_SEED,
                        PRETRAIN_STEPS, PRETRAIN_LR, vars(DESK) if hasattr(DESK, "__dict__")
                        else str(DESK))
    cache = _cache_dir()
    ckpt = (cache / f"base_{key}.ckpt") if cache else None
    if ckpt and ckpt.exists():
        _TIMINGS["pretrain_s"] = 0.0
        return load_checkpoint(ckpt)
    text, _ = build_pretrain_text(240, TRIPLES_PER_DOC, seed=PRETRAIN_TEXT_SEED,
                                  exclude_entities=desk_world.entities)
    start = time.perf_counter()
    params, _ = pretrain_base(text, DESK, steps=PRETRAIN_STEPS, seed=PRETRAIN_SEED,
                              lr=PRETRAIN_LR, batch_size=16)
    _TIMINGS["pretrain_s"] = time.perf_counter() - start
    if ckpt:
        save_checkpoint(params, ckpt)
    return params


def _parameterize(world, base, root, warm_adapter=None):
    store = ParametricCorpus(root)
    hyper = TrainHyper(**ADAPTER_HYPER)
    config = A.AdapterConfig(rank=2, alpha=32.0)
    for doc in world.corpus.docs:
        dataset = build_dataset(doc, n=AUG_N, m=AUG_M, seed=ADAPTER_SEED)
        if warm_adapter is not None:
            init = reseed_adapter(warm_adapter, doc.doc_id)
        else:
            init = A.new_random(config, base, doc.doc_id, seed=ADAPTER_SEED)
        trained, _ = train_adapter(base, dataset, init, hyper)
        store.put(trained, overwrite=True)
        store.put_augmented(dataset, overwrite=True)
    return store


@pytest.fixture(scope="session")
def desk_store(desk_world, desk_base, tmp_path_factory):
    cache = _cache_dir()
    key = _settings_key("store", WORLD_SEED, ADAPTER_SEED, desk_base.fingerprint,
                        A.ADAPTER_INIT_STD, ADAPTER_HYPER, AUG_N, AUG_M)
    if cache:
        root = cache / f"store_{key}"
        if (root / "manifest.json").exists():
            _TIMINGS["parameterize_s"] = 0.0
            return ParametricCorpus(root)
    else:
        root = tmp_path_factory.mktemp("desk_store")
    start = time.perf_counter()
    store = _parameterize(desk_world, desk_base, root)
    _TIMINGS["parameterize_s"] = time.perf_counter() - start
    return store


@pytest.fixture(scope="session")
def desk_pipeline(desk_world, desk_base, desk_store):
    return Pipeline(corpus=desk_world.corpus, index=build_index(desk_world.corpus),
                    base=desk_base, store=desk_store, k=3)


@pytest.fixture(scope="session")
def heldout_items(desk_world):
    items = []
    for doc in desk_world.corpus.docs:
        for question, answer in desk_world.heldout_qa[doc.doc_id]:
            items.append(QAItem(question=question, gold_answers=(answer,),
                                source_doc_id=doc.doc_id))
    return items


# ---------------------------------------------------------------------------
# criteria 1-4: analytic formulas, exact


def test_criterion_1_storage_formula():
    params, size = storage_estimate(32, 4096, 14336, 2, bytes_per_param=2)
    ok = params == 2_359_296 and size == 4_718_592
    _report(1, ok, f"storage_estimate(32,4096,14336,r=2,2B) = {params:,} params, "
                   f"{size:,} bytes ({size / 1e6:.2f} MB)")


def test_criterion_2_compute_accounting():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        d = int(rng.integers(0, 100_000))
        c = compute_cost_estimate(d)
        augment = c["augment_decode"] + c["augment_forward"]
        train = c["train_forward"] + c["train_backward"]
        ok &= augment == 3 * d and train == 9 * d and c["total"] == 12 * d
    _report(2, ok, "augmentation 3|d| + training 9|d| = 12|d| for 100 random |d|")


def test_criterion_3_online_saving():
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(50):
        q = int(rng.integers(1, 10_000))
        s = online_saving_estimate(q_tokens=q, d_tokens=q, t=6)
        ok &= s["saved_input_tokens"] == 6 * q
        ok &= s["in_context_input"] - s["parametric_input"] == 6 * q
    _report(3, ok, "saving = 6|d| at t=6, |d|=|q|")


def test_criterion_4_serialized_payload_size():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    ok = True
    for _ in range(20):
        n = int(rng.integers(1, 5))
        heads = 2
        h = int(rng.integers(1, 17)) * heads * 2
        l = int(rng.integers(h // 2, 4 * h))
        r = int(rng.integers(1, min(h, l) // 2 + 1))
        config = ModelConfig(n_layers=n, hidden=h, ffn_intermediate=l,
                             n_heads=heads, max_seq_len=32)
        base = init_params(config, seed=0)
        adapter = A.new_random(A.AdapterConfig(rank=r), base, doc_id=1, seed=0)
        blob = A.serialize(adapter)
        header = 8 + 4 + 8 + 8 + 1 + 2 + 4 + 4
        tensor_bytes = len(blob) - header - 11 * len(adapter.matrices) - 4
        ok &= tensor_bytes == 2 * n * r * (h + l) * 4
    elapsed = time.perf_counter() - start
    _report(4, ok and elapsed < 5.0,
            f"20 random configs: payload = 2nr(h+l)*4 bytes ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 5: gradient correctness in fp64


def test_criterion_5_gradient_check():
    start = time.perf_counter()
    config = ModelConfig(n_layers=2, hidden=16, ffn_intermediate=64,
                         n_heads=2, max_seq_len=64)
    base = init_params(config, seed=3)
    adapter_config = A.AdapterConfig(rank=2, alpha=32.0)
    init = A.new_random(adapter_config, base, doc_id=99, seed=4)
    # train briefly so B is nonzero and every gradient path is live
    world = gen_synthetic_corpus(1, 2, seed=5)
    dataset = build_dataset(world.corpus.docs[0], n=1, m=2, seed=0)
    adapter, _ = train_adapter(base, dataset, init,
                               TrainHyper(learning_rate=1e-3, epochs=2, seed=0))
    ids, mask = build_sequence(("a fact to encode", "asked how?", "reply"),
                               config.max_seq_len)
    analytic = analytic_adapter_grads(base, adapter, ids, mask)
    numeric = finite_diff_grad(base, adapter, ids, mask, epsilon=1e-6,
                               samples_per_tensor=26, seed=6)
    checked = 0
    worst = 0.0
    for name, samples in numeric.items():
        flat = analytic[name].reshape(-1)
        for idx, num in samples.items():
            ana = float(flat[idx])
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, rel)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = checked >= 200 and worst <= 1e-4 and elapsed < 120
    _report(5, ok, f"{checked} coords, max rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 6-9: the desk pipeline


def _mean_f1(report, mode):
    return report.per_mode[mode].mean_f1


def _per_doc_f1(rows, items):
    by_doc = {}
    for row, item in zip(rows, items):
        scores = by_doc.setdefault(item.source_doc_id, [])
        scores.append(row["f1"])
    return {doc: float(np.mean(scores)) for doc, scores in by_doc.items()}


def test_criterion_6_knowledge_injection(desk_pipeline, heldout_items):
    start = time.perf_counter()
    closed = run_benchmark(heldout_items, [Mode.CLOSED_BOOK], desk_pipeline)
    parametric = run_benchmark(heldout_items, [Mode.PARAMETRIC], desk_pipeline,
                               k=1, oracle_retrieval=True)
    closed_f1 = _mean_f1(closed, "closed_book")
    par_f1 = _mean_f1(parametric, "parametric")
    gap = par_f1 - closed_f1

    closed_by_doc = _per_doc_f1(closed.rows, heldout_items)
    par_by_doc = _per_doc_f1(parametric.rows, heldout_items)
    improved = sum(1 for doc in closed_by_doc if par_by_doc[doc] > closed_by_doc[doc])
    frac = improved / len(closed_by_doc)

    eval_s = time.perf_counter() - start
    total_s = _TIMINGS.get("pretrain_s", 0.0) + _TIMINGS.get("parameterize_s", 0.0) + eval_s
    ok = gap >= 0.3 and frac >= 0.70 and total_s <= 45 * 60
    _report(6, ok, f"parametric k=1 F1 {par_f1:.3f} vs closed-book {closed_f1:.3f} "
                   f"(gap {gap:+.3f} >= 0.3), {improved}/{len(closed_by_doc)} docs improved "
                   f"({frac:.0%} >= 70%), pipeline {total_s / 60:.1f} min <= 45 min")


def test_criterion_7_merge_at_k3(desk_pipeline, desk_world, desk_store, desk_base,
                                 heldout_items):
    start = time.perf_counter()
    index = desk_pipeline.index
    eligible = [item for item in heldout_items
                if item.source_doc_id in retrieve_top_k(index, item.question, 3).doc_ids()]
    items = eligible[:20]
    assert len(items) == 20, f"only {len(items)} questions had the source doc in top-3"

    closed = run_benchmark(items, [Mode.CLOSED_BOOK], desk_pipeline)
    merged = run_benchmark(items, [Mode.PARAMETRIC], desk_pipeline, k=3)
    gap = _mean_f1(merged, "parametric") - _mean_f1(closed, "closed_book")

    # merged delta must equal the fp64 dense-sum oracle within 1e-5 relative
    doc_ids = retrieve_top_k(index, items[0].question, 3).doc_ids()
    adapters = desk_store.get_many(doc_ids).found
    delta = A.merge(adapters)
    worst = 0.0
    for key in delta.tensors:
        oracle = sum(a.config.scale * (a.matrices[key][0].astype(np.float64)
                                       @ a.matrices[key][1].astype(np.float64).T)
                     for a in adapters)
        scale = max(float(np.abs(oracle).max()), 1e-12)
        worst = max(worst, float(np.abs(delta.tensors[key] - oracle).max()) / scale)

    elapsed = time.perf_counter() - start
    ok = gap >= 0.2 and worst <= 1e-5 and elapsed <= 600
    _report(7, ok, f"k=3 merged F1 gap {gap:+.3f} >= 0.2 over 20 questions, "
                   f"merge vs fp64 oracle {worst:.2e} <= 1e-5, {elapsed:.0f}s")


def test_criterion_8_pipeline_invariants(desk_pipeline, desk_world, desk_base,
                                         tmp_path, heldout_items):
    start = time.perf_counter()
    notes = []

    # (a) zero-delta parametric answers == closed_book answers
    doc = desk_world.corpus.docs[0]
    question = desk_world.heldout_qa[doc.doc_id][0][0]
    zero_store = ParametricCorpus(tmp_path / "zero_store")
    zero_store.put(A.new_random(A.AdapterConfig(rank=2, alpha=32.0), desk_base,
                                doc.doc_id, seed=123))
    zero_pipe = Pipeline(corpus=desk_world.corpus, index=desk_pipeline.index,
                         base=desk_base, store=zero_store, k=1)
    closed = zero_pipe.answer(question, Mode.CLOSED_BOOK)
    parametric = zero_pipe.answer(question, Mode.PARAMETRIC, k=1,
                                  forced_doc_ids=[doc.doc_id])
    ok_a = (parametric.answer == closed.answer
            and parametric.merged_doc_ids == [doc.doc_id])
    notes.append(f"(a) zero-delta==closed_book: {ok_a}")

    # (b) base checkpoint bytes unchanged after 100 mixed-mode queries
    before = tmp_path / "before.ckpt"
    after = tmp_path / "after.ckpt"
    save_checkpoint(desk_base, before)
    modes = [Mode.CLOSED_BOOK, Mode.IN_CONTEXT, Mode.PARAMETRIC, Mode.COMBINED,
             Mode.IN_CONTEXT_AUGMENTED]
    for i in range(100):
        item = heldout_items[i % len(heldout_items)]
        try:
            desk_pipeline.answer(item.question, modes[i % len(modes)], k=1 + i % 3)
        except Exception:
            pass  # Overlong etc. must still leave the base untouched
    save_checkpoint(desk_base, after)
    ok_b = before.read_bytes() == after.read_bytes()
    notes.append(f"(b) base bytes stable over 100 queries: {ok_b}")

    # (c) parametric prompt count independent of k; in-context grows by passage sizes
    from prag.text import encode_bytes, render_passage
    question = heldout_items[0].question
    doc_ids = [d.doc_id for d in desk_world.corpus.docs[:3]]
    par_counts = {desk_pipeline.answer(question, Mode.PARAMETRIC, k=k,
                                       forced_doc_ids=doc_ids[:k]).prompt_token_count
                  for k in (1, 2, 3)}
    closed_count = desk_pipeline.answer(question, Mode.CLOSED_BOOK).prompt_token_count
    ok_c = par_counts == {closed_count}
    expected = closed_count
    for k in (1, 2, 3):
        got = desk_pipeline.answer(question, Mode.IN_CONTEXT, k=k,
                                   forced_doc_ids=doc_ids[:k]).prompt_token_count
        expected_k = closed_count + sum(
            len(encode_bytes(render_passage(i + 1, desk_world.corpus.get(d).text)))
            for i, d in enumerate(doc_ids[:k]))
        ok_c &= got == expected_k
    notes.append(f"(c) prompt accounting: {ok_c}")

    # (d) BM25 rankings equal brute force on a 500-doc corpus, bit-exact
    big = gen_synthetic_corpus(500, 2, seed=77)
    index = build_index(big.corpus)
    ok_d = True
    questions = [qa[0][0] for qa in list(big.heldout_qa.values())[:20]]
    for query in questions:
        got = retrieve_top_k(index, query, 10).ranked
        tokens = tokenize_words(query)
        brute = []
        for pos, doc in enumerate(big.corpus.docs):
            toks = doc_tokens(doc)
            counts = {}
            for tok in toks:
                counts[tok] = counts.get(tok, 0) + 1
            score = 0.0
            for term in tokens:
                tf = counts.get(term, 0)
                if tf == 0:
                    continue
                df = len(index.postings.get(term, ()))
                idf = math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))
                norm = index.k1 * (1 - index.b + index.b * len(toks) / index.avg_doc_length)
                score += idf * (tf * (index.k1 + 1)) / (tf + norm)
            if score > 0.0:
                brute.append((doc.doc_id, score))
        brute.sort(key=lambda item: (-item[1], item[0]))
        ok_d &= got == brute[:10]
    notes.append(f"(d) 500-doc BM25 == brute force: {ok_d}")

    elapsed = time.perf_counter() - start
    ok = ok_a and ok_b and ok_c and ok_d and elapsed < 300
    _report(8, ok, "; ".join(notes) + f"; {elapsed:.0f}s")


def test_criterion_9_warmup_replication(desk_world, desk_base, desk_store,
                                        heldout_items, desk_pipeline,
                                        tmp_path_factory):
    start = time.perf_counter()
    text_entities = build_pretrain_text(240, TRIPLES_PER_DOC,
                                        seed=PRETRAIN_TEXT_SEED,
                                        exclude_entities=desk_world.entities)[1]
    pairs = gen_warmup_qa(600, seed=WARMUP_SEED,
                          exclude_entities=desk_world.entities | text_entities)
    warm = warmup_init(desk_base, pairs, TrainHyper(**ADAPTER_HYPER),
                       adapter_config=A.AdapterConfig(rank=2, alpha=32.0))

    warm_store = _parameterize(desk_world, desk_base,
                               tmp_path_factory.mktemp("warm_store"),
                               warm_adapter=warm)
    # every adapter must round-trip and carry the base fingerprint
    consistent = True
    for doc in desk_world.corpus.docs:
        adapter = warm_store.get(doc.doc_id)
        consistent &= adapter is not None and adapter.model_fingerprint == desk_base.fingerprint
    for doc in desk_world.corpus.docs:
        adapter = desk_store.get(doc.doc_id)
        consistent &= adapter is not None and adapter.model_fingerprint == desk_base.fingerprint

    warm_pipe = Pipeline(corpus=desk_world.corpus, index=desk_pipeline.index,
                         base=desk_base, store=warm_store, k=3)
    warm_report = run_benchmark(heldout_items, [Mode.PARAMETRIC], warm_pipe,
                                k=1, oracle_retrieval=True)
    rand_report = run_benchmark(heldout_items, [Mode.PARAMETRIC], desk_pipeline,
                                k=1, oracle_retrieval=True)
    warm_f1 = _mean_f1(warm_report, "parametric")
    rand_f1 = _mean_f1(rand_report, "parametric")

    elapsed = time.perf_counter() - start
    ok = consistent and elapsed <= 60 * 60
    _report(9, ok, f"warm-up init F1 {warm_f1:.3f} vs random init F1 {rand_f1:.3f} "
                   f"(delta {warm_f1 - rand_f1:+.3f}, reported not gated); "
                   f"both runs complete, fingerprints consistent: {consistent}; "
                   f"{elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# criterion 10: metric fixtures


def test_criterion_10_metric_fixtures():
    checks = [
        (f1("Alderville", ["Alderville"]), 1.0),
        (f1("totally unrelated", ["Alderville"]), 0.0),
        (f1("paris france", ["paris"]), 2.0 / 3.0),
    ]
    ok = all(got == expected for got, expected in checks)
    _report(10, ok, "identity=1.0, disjoint=0.0, partial=2/3 exactly")
