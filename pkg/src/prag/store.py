"""The parametric corpus: per-document adapter files plus cost estimators.

Layout: root/manifest.json, root/adapters/<doc_id hex>.pra, and (for the
augmented-context mode) root/augmented/<doc_id hex>.json. All writes go
through a temp file and an atomic rename, so readers never observe a
partially written adapter or manifest.
"""

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .adapters import LowRankAdapter, deserialize, serialize
from .augment import AugmentedDataset
from .errors import DuplicateEntry, IoFailure


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise IoFailure(f"failed to write {path}: {exc}") from exc


@dataclass
class GetManyResult:
    found: list     # LowRankAdapter, in the order their ids were requested
    missing: list   # doc ids with no stored adapter


class ParametricCorpus:
    """Directory-backed map from doc id to its serialized adapter."""

    def __init__(self, root):
        self.root = Path(root)
        self.adapters_dir = self.root / "adapters"
        self.augmented_dir = self.root / "augmented"
        self.manifest_path = self.root / "manifest.json"
        self.adapters_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {}
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)

    def _write_manifest(self) -> None:
        body = json.dumps(self.manifest, indent=2, sort_keys=True).encode("utf-8")
        _atomic_write(self.manifest_path, body)

    def _key(self, doc_id: int) -> str:
        return f"{doc_id:016x}"

    def __contains__(self, doc_id: int) -> bool:
        return self._key(doc_id) in self.manifest

    def __len__(self) -> int:
        return len(self.manifest)

    def entry(self, doc_id: int) -> dict | None:
        return self.manifest.get(self._key(doc_id))

    def put(self, adapter: LowRankAdapter, overwrite: bool = False) -> dict:
        key = self._key(adapter.doc_id)
        existing = self.manifest.get(key)
        if existing is not None and not overwrite:
            raise DuplicateEntry(f"adapter for doc {key} already stored")
        blob = serialize(adapter)
        path = self.adapters_dir / f"{key}.pra"
        _atomic_write(path, blob)
        entry = {
            "adapter_path": str(path.relative_to(self.root)),
            "bytes": len(blob),
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "model_fingerprint": f"{adapter.model_fingerprint:016x}",
            "config": {
                "rank": adapter.config.rank,
                "alpha": adapter.config.alpha,
                "scaling_mode": adapter.config.scaling_mode,
            },
        }
        self.manifest[key] = entry
        self._write_manifest()
        return entry

    def get(self, doc_id: int) -> LowRankAdapter | None:
        entry = self.manifest.get(self._key(doc_id))
        if entry is None:
            return None
        with open(self.root / entry["adapter_path"], "rb") as fh:
            return deserialize(fh.read())

    def get_many(self, doc_ids) -> GetManyResult:
        """Adapters for the found ids, in request order; missing ids listed apart."""
        found, missing = [], []
        for doc_id in doc_ids:
            adapter = self.get(doc_id)
            if adapter is None:
                missing.append(doc_id)
            else:
                found.append(adapter)
        return GetManyResult(found=found, missing=missing)

    # -- augmented datasets (for the augmented-context baseline) --

    def put_augmented(self, dataset: AugmentedDataset, overwrite: bool = False) -> None:
        self.augmented_dir.mkdir(parents=True, exist_ok=True)
        path = self.augmented_dir / f"{self._key(dataset.doc_id)}.json"
        if path.exists() and not overwrite:
            raise DuplicateEntry(f"augmented data for doc {self._key(dataset.doc_id)} already stored")
        _atomic_write(path, json.dumps(dataset.to_dict(), ensure_ascii=False).encode("utf-8"))

    def get_augmented(self, doc_id: int) -> AugmentedDataset | None:
        path = self.augmented_dir / f"{self._key(doc_id)}.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return AugmentedDataset.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# cost accounting


def storage_estimate(n_layers: int, hidden: int, ffn_intermediate: int, rank: int,
                     bytes_per_param: int = 4) -> tuple:
    """(parameter count, bytes) of one document's adapter: 2*n*r*(h+l) params."""
    for value in (n_layers, hidden, ffn_intermediate, rank, bytes_per_param):
        if value < 0:
            raise ValueError("inputs must be non-negative")
    params = 2 * n_layers * rank * (hidden + ffn_intermediate)
    return params, params * bytes_per_param


def compute_cost_estimate(doc_tokens: int) -> dict:
    """Token-equivalent cost of parameterizing one document of |d| tokens.

    Augmentation decodes 2|d| new tokens after reading |d|; training runs a
    3|d| forward and a backward worth twice the forward. Total: 12|d|.
    """
    if doc_tokens < 0:
        raise ValueError("doc_tokens must be non-negative")
    breakdown = {
        "augment_decode": 2 * doc_tokens,
        "augment_forward": doc_tokens,
        "train_forward": 3 * doc_tokens,
        "train_backward": 6 * doc_tokens,
    }
    breakdown["total"] = sum(breakdown.values())
    return breakdown


def online_saving_estimate(q_tokens: int, d_tokens: int, t: int) -> dict:
    """Input tokens processed per query: in-context t|d|+|q| vs parametric |q|."""
    if min(q_tokens, d_tokens, t) < 0:
        raise ValueError("inputs must be non-negative")
    in_context = t * d_tokens + q_tokens
    parametric = q_tokens
    return {
        "in_context_input": in_context,
        "parametric_input": parametric,
        "saved_input_tokens": in_context - parametric,
    }
