"""Per-document low-rank adapters for the FFN matrices.

An adapter holds one (A, B) pair per FFN matrix per layer; its contribution
to a weight W is scale * A @ B.T, with scale = alpha/rank or plain alpha
depending on the recorded scaling mode. B starts at zero so a fresh adapter
is an exact no-op. Merging sums the scaled contributions of several
adapters, in retrieval-rank order, into one dense delta per matrix.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    EmptyList,
    FingerprintMismatch,
    ShapeMismatch,
    TruncatedPayload,
    VersionUnsupported,
)
from .model import (
    FFN_DOWN,
    FFN_UP,
    EffectiveWeights,
    FactorDeltas,
    ModelConfig,
    ModelParams,
)

ADAPTER_MAGIC = b"PRAGLORA"
ADAPTER_VERSION = 1

SCALING_ALPHA_OVER_R = "alpha_over_r"
SCALING_ALPHA_PLAIN = "alpha_plain"
_SCALING_CODES = {SCALING_ALPHA_OVER_R: 0, SCALING_ALPHA_PLAIN: 1}
_SCALING_NAMES = {code: name for name, code in _SCALING_CODES.items()}
_TAG_CODES = {FFN_UP: 0, FFN_DOWN: 1}
_TAG_NAMES = {0: FFN_UP, 1: FFN_DOWN}

# Init spread for the A factor; B is zero so the delta starts exactly at zero.
ADAPTER_INIT_STD = 0.4


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 2
    alpha: float = 32.0
    scaling_mode: str = SCALING_ALPHA_OVER_R

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.scaling_mode not in _SCALING_CODES:
            raise ValueError(f"unknown scaling mode {self.scaling_mode!r}")

    @property
    def scale(self) -> float:
        if self.scaling_mode == SCALING_ALPHA_OVER_R:
            return self.alpha / self.rank
        return self.alpha


def target_matrices(model_config: ModelConfig) -> list:
    """(layer, tag) keys for every adapted matrix, in serialization order."""
    keys = []
    for layer in range(model_config.n_layers):
        keys.append((layer, FFN_UP))
        keys.append((layer, FFN_DOWN))
    return keys


@dataclass(frozen=True)
class LowRankAdapter:
    doc_id: int
    model_fingerprint: int
    config: AdapterConfig
    matrices: dict = field(repr=False)  # (layer, tag) -> (A, B), read-only fp32

    def __post_init__(self):
        for a_mat, b_mat in self.matrices.values():
            a_mat.flags.writeable = False
            b_mat.flags.writeable = False

    def num_trainable_params(self) -> int:
        return sum(a.size + b.size for a, b in self.matrices.values())

    def factor_deltas(self) -> FactorDeltas:
        return FactorDeltas(factors=dict(self.matrices), scale=self.config.scale)


@dataclass(frozen=True)
class MergedDelta:
    model_fingerprint: int
    tensors: dict = field(repr=False)  # (layer, tag) -> dense delta, fp32
    source_doc_ids: tuple = ()

    def dense_tensors(self) -> dict:
        return self.tensors


def new_random(config: AdapterConfig, model: ModelParams, doc_id: int, seed: int) -> LowRankAdapter:
    """Fresh adapter: A ~ N(0, ADAPTER_INIT_STD^2), B = 0, so the delta is zero.

    The RNG is seeded from (seed, doc_id) so different documents draw
    different A column spaces under one run seed.
    """
    arch = model.config
    limit = min(arch.hidden, arch.ffn_intermediate)
    if config.rank > limit:
        raise ShapeMismatch(f"rank {config.rank} exceeds min(h, l) = {limit}")
    rng = np.random.default_rng([seed, doc_id])
    matrices = {}
    for layer, tag in target_matrices(arch):
        rows, cols = arch.ffn_shape(tag)
        a_mat = rng.normal(0.0, ADAPTER_INIT_STD, size=(rows, config.rank)).astype(np.float32)
        b_mat = np.zeros((cols, config.rank), dtype=np.float32)
        matrices[(layer, tag)] = (a_mat, b_mat)
    return LowRankAdapter(doc_id=doc_id, model_fingerprint=model.fingerprint,
                          config=config, matrices=matrices)


def delta_of(adapter: LowRankAdapter) -> MergedDelta:
    """Dense delta of one adapter: scale * A @ B.T per matrix."""
    scale = np.float32(adapter.config.scale)
    tensors = {
        key: scale * (a_mat @ b_mat.T)
        for key, (a_mat, b_mat) in adapter.matrices.items()
    }
    return MergedDelta(model_fingerprint=adapter.model_fingerprint,
                       tensors=tensors, source_doc_ids=(adapter.doc_id,))


def merge(adapters, config: AdapterConfig | None = None,
          divide_by_count: bool = False) -> MergedDelta:
    """Sum scaled adapter deltas in list order (retrieval rank) into one delta.

    Accumulation order is fixed, so merging the same list twice is
    bit-identical. ``divide_by_count`` averages instead of summing; it is off
    by default and exists for experimentation only.
    """
    adapters = list(adapters)
    if not adapters:
        raise EmptyList("cannot merge zero adapters")
    first = adapters[0]
    for other in adapters[1:]:
        if other.model_fingerprint != first.model_fingerprint:
            raise FingerprintMismatch("adapters were trained against different base models")
        if set(other.matrices) != set(first.matrices):
            raise ShapeMismatch("adapters target different matrices")
    if config is not None and config.scaling_mode != first.config.scaling_mode:
        raise ValueError("merge config scaling mode disagrees with adapters")

    tensors = {}
    for key, (a_mat, b_mat) in first.matrices.items():
        acc = np.float32(first.config.scale) * (a_mat @ b_mat.T)
        for other in adapters[1:]:
            oa, ob = other.matrices[key]
            contribution = np.float32(other.config.scale) * (oa @ ob.T)
            if contribution.shape != acc.shape:
                raise ShapeMismatch(f"matrix {key} shape mismatch in merge")
            acc = acc + contribution
        if divide_by_count:
            acc = acc / np.float32(len(adapters))
        tensors[key] = acc
    return MergedDelta(model_fingerprint=first.model_fingerprint, tensors=tensors,
                       source_doc_ids=tuple(a.doc_id for a in adapters))


def apply(base: ModelParams, delta: MergedDelta | None) -> EffectiveWeights:
    """Pair base params with a merged delta; the base is never mutated."""
    if delta is not None and delta.model_fingerprint != base.fingerprint:
        raise FingerprintMismatch(
            f"delta fingerprint {delta.model_fingerprint:#018x} "
            f"!= base {base.fingerprint:#018x}")
    return EffectiveWeights(base=base, delta=delta)


def zero_delta(base: ModelParams) -> MergedDelta:
    """All-zero dense delta (identity behaviour), mainly for tests and probes."""
    config = base.config
    tensors = {
        (layer, tag): np.zeros(config.ffn_shape(tag), dtype=np.float32)
        for layer, tag in target_matrices(config)
    }
    return MergedDelta(model_fingerprint=base.fingerprint, tensors=tensors)


# ---------------------------------------------------------------------------
# serialization (.pra)


def serialize(adapter: LowRankAdapter) -> bytes:
    payload = bytearray()
    payload += struct.pack("<QQ", adapter.doc_id, adapter.model_fingerprint)
    payload += struct.pack("<BHf", _SCALING_CODES[adapter.config.scaling_mode],
                           adapter.config.rank, adapter.config.alpha)
    payload += struct.pack("<I", len(adapter.matrices))
    for (layer, tag), (a_mat, b_mat) in sorted(
            adapter.matrices.items(), key=lambda kv: (kv[0][0], _TAG_CODES[kv[0][1]])):
        rows, cols = a_mat.shape[0], b_mat.shape[0]
        payload += struct.pack("<HBII", layer, _TAG_CODES[tag], rows, cols)
        payload += np.ascontiguousarray(a_mat, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(b_mat, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(payload))
    return ADAPTER_MAGIC + struct.pack("<I", ADAPTER_VERSION) + bytes(payload) + struct.pack("<I", crc)


def deserialize(blob: bytes) -> LowRankAdapter:
    if blob[:8] != ADAPTER_MAGIC:
        raise BadMagic("not an adapter blob")
    if len(blob) < 16:
        raise TruncatedPayload("blob shorter than header plus checksum")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != ADAPTER_VERSION:
        raise VersionUnsupported(f"adapter format version {version}")
    payload = blob[12:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumMismatch("adapter payload checksum mismatch")

    try:
        doc_id, fingerprint = struct.unpack_from("<QQ", payload, 0)
        scaling_code, rank, alpha = struct.unpack_from("<BHf", payload, 16)
        (n_matrices,) = struct.unpack_from("<I", payload, 23)
        offset = 27
        matrices = {}
        for _ in range(n_matrices):
            layer, tag_code, rows, cols = struct.unpack_from("<HBII", payload, offset)
            offset += 11
            a_bytes = 4 * rows * rank
            b_bytes = 4 * cols * rank
            if offset + a_bytes + b_bytes > len(payload):
                raise TruncatedPayload("adapter payload ends inside a tensor")
            a_mat = np.frombuffer(payload, dtype="<f4", count=rows * rank,
                                  offset=offset).reshape(rows, rank).copy()
            offset += a_bytes
            b_mat = np.frombuffer(payload, dtype="<f4", count=cols * rank,
                                  offset=offset).reshape(cols, rank).copy()
            offset += b_bytes
            matrices[(layer, _TAG_NAMES[tag_code])] = (a_mat, b_mat)
    except struct.error as exc:
        raise TruncatedPayload(f"adapter payload too short: {exc}") from exc

    config = AdapterConfig(rank=rank, alpha=float(np.float32(alpha)),
                           scaling_mode=_SCALING_NAMES[scaling_code])
    return LowRankAdapter(doc_id=doc_id, model_fingerprint=fingerprint,
                          config=config, matrices=matrices)
