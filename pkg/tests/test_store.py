import json
import os
from pathlib import Path

import numpy as np
import pytest

from prag import adapters as A
from prag.augment import AugmentedDataset
from prag.errors import ChecksumMismatch, DuplicateEntry
from prag.model import ModelConfig, init_params
from prag.store import (
    ParametricCorpus,
    compute_cost_estimate,
    online_saving_estimate,
    storage_estimate,
)

TINY = ModelConfig(n_layers=2, hidden=16, ffn_intermediate=32, n_heads=2, max_seq_len=48)


@pytest.fixture(scope="module")
def base():
    return init_params(TINY, seed=21)


def make_adapter(base, doc_id, seed=0):
    rng = np.random.default_rng(seed)
    fresh = A.new_random(A.AdapterConfig(), base, doc_id=doc_id, seed=seed)
    mats = {k: (a.copy(), rng.normal(0, 0.02, b.shape).astype(np.float32))
            for k, (a, b) in fresh.matrices.items()}
    return A.LowRankAdapter(doc_id, base.fingerprint, fresh.config, mats)


def test_put_get_round_trip(tmp_path, base):
    store = ParametricCorpus(tmp_path)
    adapter = make_adapter(base, doc_id=42)
    store.put(adapter)
    loaded = store.get(42)
    assert A.serialize(loaded) == A.serialize(adapter)


def test_duplicate_put_guard(tmp_path, base):
    store = ParametricCorpus(tmp_path)
    adapter = make_adapter(base, doc_id=42)
    store.put(adapter)
    with pytest.raises(DuplicateEntry):
        store.put(adapter)
    store.put(adapter, overwrite=True)  # allowed with the flag


def test_get_many_order_and_missing(tmp_path, base):
    store = ParametricCorpus(tmp_path)
    for doc_id in (3, 1, 2):
        store.put(make_adapter(base, doc_id=doc_id, seed=doc_id))
    result = store.get_many([2, 99, 1])
    assert [a.doc_id for a in result.found] == [2, 1]
    assert result.missing == [99]
    empty = store.get_many([])
    assert empty.found == [] and empty.missing == []


def test_corrupt_file_detected(tmp_path, base):
    store = ParametricCorpus(tmp_path)
    adapter = make_adapter(base, doc_id=7)
    store.put(adapter)
    path = store.root / store.entry(7)["adapter_path"]
    blob = bytearray(path.read_bytes())
    blob[50] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        store.get(7)


def test_manifest_survives_reopen(tmp_path, base):
    store = ParametricCorpus(tmp_path)
    store.put(make_adapter(base, doc_id=5))
    reopened = ParametricCorpus(tmp_path)
    assert 5 in reopened
    assert reopened.get(5) is not None


def test_no_partial_file_after_failed_write(tmp_path, base, monkeypatch):
    """Crash between temp write and rename leaves no partial adapter visible."""
    store = ParametricCorpus(tmp_path)
    adapter = make_adapter(base, doc_id=9)

    real_replace = os.replace
    def exploding_replace(src, dst):
        if str(dst).endswith(".pra"):
            raise OSError("simulated crash at rename")
        return real_replace(src, dst)

    monkeypatch.setattr(os, "replace", exploding_replace)
    with pytest.raises(Exception):
        store.put(adapter)
    monkeypatch.undo()

    assert 9 not in ParametricCorpus(tmp_path).manifest
    assert not list(store.adapters_dir.glob("*.pra"))
    assert not list(store.adapters_dir.glob("*.tmp"))


def test_augmented_round_trip(tmp_path):
    store = ParametricCorpus(tmp_path)
    ds = AugmentedDataset(doc_id=11, rewrites=("text", "rewrite"),
                          qa_pairs=(("q?", "a"),))
    store.put_augmented(ds)
    assert store.get_augmented(11) == ds
    assert store.get_augmented(12) is None


def test_storage_estimate_paper_scale():
    params, size = storage_estimate(32, 4096, 14336, 2, bytes_per_param=2)
    assert params == 2_359_296
    assert size == 4_718_592


def test_storage_estimate_zero_rank():
    assert storage_estimate(4, 128, 512, 0) == (0, 0)


def test_storage_estimate_matches_serialized_payload(base):
    adapter = make_adapter(base, doc_id=1)
    params, size = storage_estimate(TINY.n_layers, TINY.hidden,
                                    TINY.ffn_intermediate, 2, bytes_per_param=4)
    assert adapter.num_trainable_params() == params
    blob = A.serialize(adapter)
    overhead = 8 + 4 + 8 + 8 + 1 + 2 + 4 + 4 + 11 * len(adapter.matrices) + 4
    assert len(blob) - overhead == size


def test_compute_cost_breakdown():
    cost = compute_cost_estimate(100)
    assert cost == {"augment_decode": 200, "augment_forward": 100,
                    "train_forward": 300, "train_backward": 600, "total": 1200}
    assert compute_cost_estimate(0)["total"] == 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = int(rng.integers(0, 10_000))
        breakdown = compute_cost_estimate(d)
        parts = [v for k, v in breakdown.items() if k != "total"]
        assert sum(parts) == breakdown["total"] == 12 * d


def test_online_saving():
    saving = online_saving_estimate(q_tokens=50, d_tokens=50, t=6)
    assert saving["saved_input_tokens"] == 6 * 50
    assert online_saving_estimate(10, 10, 0)["saved_input_tokens"] == 0
    rng = np.random.default_rng(1)
    for _ in range(20):
        q, d, t = (int(rng.integers(0, 1000)) for _ in range(3))
        s = online_saving_estimate(q, d, t)
        assert s["saved_input_tokens"] == s["in_context_input"] - s["parametric_input"]
